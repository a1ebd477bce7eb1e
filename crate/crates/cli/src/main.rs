fn main() {
    println!("vesselseg");
}
