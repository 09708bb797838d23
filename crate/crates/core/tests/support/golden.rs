//! Prompt assets and built prompts checked against golden text.

use hpo_core::llm_sampler::templates::{self, placeholders, render};
use hpo_core::llm_sampler::{build_init_messages, build_opt_messages, OptState};
use hpo_core::{Direction, Domain, ParamAssignment, ParamSpec, ParamValue, PromptMode, SearchSpace, TaskDescription};

const LIGHTGBM_INTS: &str = "num_leaves, max_depth, n_estimators, min_child_samples";

const GOLDEN: [(&str, &str); 13] = [
    ("init_plain", include_str!("../golden/init_plain.txt")),
    ("init_tpe_independent", include_str!("../golden/init_tpe_independent.txt")),
    ("init_tpe_relative", include_str!("../golden/init_tpe_relative.txt")),
    ("opt_buffered", include_str!("../golden/opt_buffered.txt")),
    ("opt_plain", include_str!("../golden/opt_plain.txt")),
    ("opt_reasoning", include_str!("../golden/opt_reasoning.txt")),
    ("opt_tpe_independent", include_str!("../golden/opt_tpe_independent.txt")),
    ("opt_tpe_relative", include_str!("../golden/opt_tpe_relative.txt")),
    ("summarize", include_str!("../golden/summarize.txt")),
    ("system_buffered", include_str!("../golden/system_buffered.txt")),
    ("system_plain", include_str!("../golden/system_plain.txt")),
    ("system_reasoning", include_str!("../golden/system_reasoning.txt")),
    ("system_tpe", include_str!("../golden/system_tpe.txt")),
];

fn golden(name: &str) -> String {
    GOLDEN.iter().find(|(n, _)| *n == name).map(|(_, t)| t.to_string()).unwrap_or_else(|| panic!("no golden file {name}"))
}

fn sentinels() -> Vec<(&'static str, String)> {
    [
        "model_name",
        "problem_description",
        "metric",
        "direction",
        "best_score",
        "best_params",
        "current_ranges",
        "search_space_dict",
        "param_name",
        "param_range",
        "conversation_history",
    ]
    .iter()
    .map(|k| (*k, format!("<<{k}>>")))
    .chain([("integer_params", LIGHTGBM_INTS.to_string())])
    .collect()
}

fn render_with(t: &str, values: &[(&'static str, String)]) -> String {
    let view: Vec<(&str, &str)> = values.iter().map(|(k, v)| (*k, v.as_str())).collect();
    render(t, &view).unwrap()
}

pub fn every_asset_matches_its_golden_text() {
    let values = sentinels();
    for (name, asset) in templates::ALL {
        assert_eq!(render_with(asset, &values), render_with(&golden(name), &values), "template {name}");
        for p in placeholders(asset) {
            assert!(values.iter().any(|(k, _)| *k == p), "{name} uses unknown placeholder {p}");
        }
    }
}

fn lightgbm_space() -> SearchSpace {
    SearchSpace::new([
        ParamSpec::new("num_leaves", Domain::int(20, 150)).unwrap(),
        ParamSpec::new("max_depth", Domain::int(3, 12)).unwrap(),
        ParamSpec::new("learning_rate", Domain::float(0.01, 0.3)).unwrap(),
        ParamSpec::new("n_estimators", Domain::int(50, 500)).unwrap(),
        ParamSpec::new("min_child_samples", Domain::int(5, 100)).unwrap(),
        ParamSpec::new("subsample", Domain::float(0.5, 1.0)).unwrap(),
    ])
    .unwrap()
}

fn task() -> TaskDescription {
    TaskDescription {
        model_name: "LightGBM".into(),
        problem_description: "binary classification of customer churn".into(),
        metric: "f1".into(),
        direction: Direction::Maximize,
    }
}

pub fn built_prompts_match_golden_text() {
    let space = lightgbm_space();
    let best = ParamAssignment::new().with("num_leaves", ParamValue::Int(31)).with("learning_rate", ParamValue::Float(0.05));
    let state = OptState { best_score: 0.8125, best_params: &best, space: &space };
    let t = task();
    let values: Vec<(&'static str, String)> = vec![
        ("model_name", t.model_name.clone()),
        ("problem_description", t.problem_description.clone()),
        ("metric", t.metric.clone()),
        ("direction", "maximize".into()),
        ("best_score", "0.8125".into()),
        ("best_params", r#"{"num_leaves": 31, "learning_rate": 0.05}"#.into()),
        ("current_ranges", r#"{"num_leaves": [20, 150], "max_depth": [3, 12], "learning_rate": [0.01, 0.3], "n_estimators": [50, 500], "min_child_samples": [5, 100], "subsample": [0.5, 1]}"#.into()),
        ("param_name", "max_depth".into()),
        ("param_range", "[3, 12]".into()),
    ];
    let mut with_space = values.clone();
    with_space.push((
        "search_space_dict",
        concat!(
            r#"{"num_leaves": {"type": "int", "low": 20, "high": 150, "log": false}, "#,
            r#""max_depth": {"type": "int", "low": 3, "high": 12, "log": false}, "#,
            r#""learning_rate": {"type": "float", "low": 0.01, "high": 0.3, "log": false}, "#,
            r#""n_estimators": {"type": "int", "low": 50, "high": 500, "log": false}, "#,
            r#""min_child_samples": {"type": "int", "low": 5, "high": 100, "log": false}, "#,
            r#""subsample": {"type": "float", "low": 0.5, "high": 1, "log": false}}"#
        )
        .into(),
    ));

    let opt = build_opt_messages(&t, &state, PromptMode::Reasoning, &[], None).unwrap();
    assert_eq!(opt[0].content, render_with(&golden("system_reasoning"), &values));
    assert_eq!(opt[1].content, render_with(&golden("opt_reasoning"), &values));

    let opt = build_opt_messages(&t, &state, PromptMode::Plain, &[], None).unwrap();
    assert_eq!(opt[0].content, render_with(&golden("system_plain"), &values));
    assert_eq!(opt[1].content, render_with(&golden("opt_plain"), &values));

    let opt = build_opt_messages(&t, &state, PromptMode::TpeRelative, &[], None).unwrap();
    assert_eq!(opt[0].content, render_with(&golden("system_tpe"), &values));
    assert_eq!(opt[1].content, render_with(&golden("opt_tpe_relative"), &with_space));

    let opt = build_opt_messages(&t, &state, PromptMode::TpeIndependent, &[], Some("max_depth")).unwrap();
    assert_eq!(opt[1].content, render_with(&golden("opt_tpe_independent"), &values));

    let init = build_init_messages(&t, PromptMode::TpeIndependent, Some(&space), Some("max_depth")).unwrap();
    assert_eq!(init[1].content, render_with(&golden("init_tpe_independent"), &values));
    let init = build_init_messages(&t, PromptMode::Buffered, None, None).unwrap();
    assert_eq!(init[0].content, render_with(&golden("system_buffered"), &values));
    assert_eq!(init[1].content, golden("init_plain"));
}
