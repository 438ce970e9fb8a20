fn main() {
    println!("transmix");
}
