//! Regenerates the toy fixture: `cargo run -p cape-core --example make_toy_fixture -- <dir>`.

#[path = "../tests/common/toy.rs"]
mod toy;

fn main() {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/toy").to_string());
    toy::build(std::path::Path::new(&dir));
    println!("wrote {dir}");
}
