use dbsa::fixtures::PROMPTS;
use dbsa::tokenization::tokenize;

fn golden(name: &str) -> String {
    let path = format!("{}/tests/golden/{name}.tokens", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(path).unwrap()
}

fn rendered(prompt: &str) -> String {
    let mut out = tokenize(prompt).token_strings().join("\n");
    out.push('\n');
    out
}

#[test]
fn bundled_prompts_match_golden_files() {
    for fixture in PROMPTS {
        let name = fixture.file_name.trim_end_matches(".txt");
        assert_eq!(rendered(fixture.contents).as_bytes(), golden(name).as_bytes(), "{name}");
    }
}

#[test]
fn landmark_tokens() {
    let legal = tokenize(dbsa::fixtures::PROMPT_LEGAL);
    let legal = legal.token_strings();
    assert!(legal.contains(&"$10"));
    let at = legal.iter().position(|t| *t == "50").unwrap();
    assert_eq!(legal[at + 1], "%");
    let medical = tokenize(dbsa::fixtures::PROMPT_MEDICAL);
    let medical = medical.token_strings();
    let at = medical.iter().position(|t| *t == "45").unwrap();
    assert_eq!(medical[at..at + 5], ["45", "-", "year", "-", "old"]);
    assert!(medical.contains(&"+"));
}
