//! Bundled instruction and template corpora.
//!
//! The three flat corpora (30 grounded-description instructions, 15 direct
//! prompts, 11 direct response templates) are shipped verbatim as data files.
//! The reasoning question/answer pairs are curated per shape category and
//! part; each question describes the part's function, mentions the word
//! "part" and the shape name, and never contains the part name itself.

use crate::error::{Error, Result};

const PAPGD_INSTRUCTIONS: &str = include_str!("../data/papgd_instructions.txt");
const DIRECT_PROMPTS: &str = include_str!("../data/direct_prompts.txt");
const DIRECT_TEMPLATES: &str = include_str!("../data/direct_templates.txt");

/// One curated reasoning question/answer pair for a (category, part).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningQa {
    pub category: &'static str,
    pub part: &'static str,
    pub question: String,
    /// Contains the `<p>part_name</p>[SEG]` unit.
    pub answer_template: String,
}

/// Functional descriptions keyed by (category, part). Kept free of the part
/// name so reasoning questions never leak it.
const FUNCTIONALITY: &[(&str, &str, &str)] = &[
    ("chair", "seat", "supports a person sitting on it"),
    ("chair", "backrest", "supports your back while you lean against it"),
    ("chair", "leg", "raises it off the floor and keeps it steady"),
    ("chair", "armrest", "lets you rest your arms while seated"),
    ("table", "tabletop", "offers a flat surface for placing items"),
    ("table", "leg", "holds the flat surface up off the floor"),
    ("table", "stretcher", "braces the supports together for rigidity"),
    ("teapot", "body", "holds the liquid inside"),
    ("teapot", "handle", "lets you hold it without touching the hot surface"),
    ("teapot", "spout", "pours the liquid out in a thin stream"),
    ("teapot", "lid", "covers the opening at the top"),
    ("lamp", "base", "keeps it stable on the floor"),
    ("lamp", "pole", "holds the upper section at height"),
    ("lamp", "shade", "softens and directs the light"),
    ("lamp", "bulb", "emits the light when switched on"),
    ("bottle", "body", "stores the liquid inside"),
    ("bottle", "neck", "narrows toward the opening you pour from"),
    ("bottle", "cap", "seals the opening shut"),
    ("bench", "seat", "supports people sitting on it"),
    ("bench", "leg", "raises it off the ground"),
    ("bench", "backrest", "supports your back while seated"),
    ("bench", "stretcher", "ties the supports together for strength"),
];

/// The bundled instruction corpora: exactly 30 grounded-description
/// instructions, 15 direct prompts, and 11 direct response templates, plus
/// the curated reasoning pairs.
#[derive(Debug, Clone)]
pub struct TemplateCorpus {
    pub papgd_instructions: Vec<String>,
    pub direct_prompts: Vec<String>,
    pub direct_templates: Vec<String>,
    pub reasoning_qas: Vec<ReasoningQa>,
}

impl TemplateCorpus {
    pub fn bundled() -> TemplateCorpus {
        let corpus = TemplateCorpus {
            papgd_instructions: lines(PAPGD_INSTRUCTIONS),
            direct_prompts: lines(DIRECT_PROMPTS),
            direct_templates: lines(DIRECT_TEMPLATES),
            reasoning_qas: FUNCTIONALITY
                .iter()
                .map(|&(category, part, functionality)| ReasoningQa {
                    category,
                    part,
                    question: format!(
                        "Which part of this 3D {category} {functionality}? Please segment it."
                    ),
                    answer_template: format!(
                        "The <p>part_name</p>[SEG] is the part of the {category} that {functionality}."
                    ),
                })
                .collect(),
        };
        corpus.check_counts().expect("bundled corpora have the documented sizes");
        corpus
    }

    fn check_counts(&self) -> Result<()> {
        let counts = [
            (self.papgd_instructions.len(), 30, "grounded-description instructions"),
            (self.direct_prompts.len(), 15, "direct prompts"),
            (self.direct_templates.len(), 11, "direct templates"),
        ];
        for (got, want, what) in counts {
            if got != want {
                return Err(Error::format(format!("expected {want} {what}, got {got}")));
            }
        }
        Ok(())
    }

    pub fn functionality(&self, category: &str, part: &str) -> Option<&str> {
        FUNCTIONALITY
            .iter()
            .find(|(c, p, _)| *c == category && *p == part)
            .map(|(_, _, f)| *f)
    }

    pub fn reasoning_qa(&self, category: &str, part: &str) -> Option<&ReasoningQa> {
        self.reasoning_qas.iter().find(|qa| qa.category == category && qa.part == part)
    }

    /// Every bundled string, for vocabulary building and round-trip tests.
    pub fn all_strings(&self) -> impl Iterator<Item = &str> {
        self.papgd_instructions
            .iter()
            .chain(&self.direct_prompts)
            .chain(&self.direct_templates)
            .map(String::as_str)
            .chain(self.reasoning_qas.iter().flat_map(|qa| {
                [qa.question.as_str(), qa.answer_template.as_str()]
            }))
    }
}

fn lines(file: &str) -> Vec<String> {
    file.lines().map(|l| l.trim_end().to_string()).filter(|l| !l.is_empty()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_counts() {
        let c = TemplateCorpus::bundled();
        assert_eq!(c.papgd_instructions.len(), 30);
        assert_eq!(c.direct_prompts.len(), 15);
        assert_eq!(c.direct_templates.len(), 11);
    }

    #[test]
    fn direct_strings_carry_both_placeholders() {
        let c = TemplateCorpus::bundled();
        for p in &c.direct_prompts {
            assert!(p.contains("part_name") && p.contains("shape_name"), "{p}");
        }
        for t in &c.direct_templates {
            assert!(t.contains("<p>part_name</p>[SEG]"), "{t}");
            assert!(t.contains("shape_name"), "{t}");
        }
    }

    #[test]
    fn reasoning_questions_never_name_the_part() {
        let c = TemplateCorpus::bundled();
        for qa in &c.reasoning_qas {
            let q = qa.question.to_lowercase();
            assert!(!q.contains(qa.part), "question for {}/{} leaks the part name", qa.category, qa.part);
            assert!(q.contains("part"), "question must use the word part");
            assert!(q.contains(qa.category), "question must mention the shape");
            assert!(qa.answer_template.contains("<p>part_name</p>[SEG]"));
        }
    }
}
