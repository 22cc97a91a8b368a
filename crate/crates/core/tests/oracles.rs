mod common;

#[test]
fn functions_match_brute_force_oracles() {
    let summary = common::oracle_suite().unwrap();
    eprintln!("{summary}");
}
