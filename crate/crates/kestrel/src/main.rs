fn main() {
    println!("kestrel");
}
