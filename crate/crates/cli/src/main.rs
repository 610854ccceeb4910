fn main() {
    println!("hetgl");
}
