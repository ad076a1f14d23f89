use heisenlab_web::{compare_traces, split_fib, tsx_write_set};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn undefended_traces_differ_and_hw_hides_them() {
    let none = parse(compare_traces("none", "page-fault-evict"));
    assert_eq!(none["equal"], false);
    assert_eq!(none["runs"].as_array().unwrap().len(), 2);
    let hw = parse(compare_traces("hw", "page-fault-evict"));
    assert_eq!(hw["equal"], true);
    assert_eq!(hw["protection"], "full");
}

#[test]
fn bad_names_come_back_as_errors() {
    assert!(parse(compare_traces("tee", "composite"))["error"].is_string());
    assert!(parse(compare_traces("hw", "psychic"))["error"].is_string());
}

#[test]
fn write_set_cliff() {
    assert_eq!(parse(tsx_write_set(488))["committed"], true);
    assert_eq!(parse(tsx_write_set(489))["committed"], false);
}

#[test]
fn split_fib_reports_commits() {
    let r = parse(split_fib(10, 50));
    assert_eq!(r["output"], 55);
    assert_eq!(r["end"], "terminated");
    assert!(r["intermediate_commits"].as_u64().unwrap() > 0);
    assert!(parse(split_fib(10, 0))["error"].is_string());
}
