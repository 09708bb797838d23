#[path = "support/golden.rs"]
mod golden;

#[test]
fn every_asset_matches_its_golden_text() {
    golden::every_asset_matches_its_golden_text();
}

#[test]
fn built_prompts_match_golden_text() {
    golden::built_prompts_match_golden_text();
}
