fn main() {
    println!("stmc");
}
