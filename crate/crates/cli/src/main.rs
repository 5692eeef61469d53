fn main() {
    println!("handver");
}
