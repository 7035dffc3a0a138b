fn main() {
    println!("pttrkit");
}
