use vp2_cli::config::{parse_file, parse_override, resolve};
use vp2_planner::suite::SuiteConfig;

fn entries(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn no_entries_gives_defaults() {
    let r = resolve(&[]).unwrap();
    assert_eq!(r.config, SuiteConfig::default());
    assert!(r.explicit.is_empty());
}

#[test]
fn resolution_is_pure() {
    let e = entries(&[("train.epochs", "3"), ("seeds", "4,5"), ("data.seed", "9")]);
    let a = resolve(&e).unwrap();
    let b = resolve(&e).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.config.train.epochs, 3);
    assert_eq!(a.config.seeds, vec![4, 5]);
    assert_eq!(a.config.data.seed, 9);
}

#[test]
fn sections_prefix_keys_and_later_entries_win() {
    let text = "prompt_size = 5\n\n[train]\nlm_lr = 0.5\nepochs = 7\n\n[data.counts]\ntrain = 12\n";
    let mut e = parse_file(text).unwrap();
    assert_eq!(e[0], ("prompt_size".to_string(), "5".to_string()));
    assert!(e.contains(&("data.counts.train".to_string(), "12".to_string())));
    e.push(parse_override("train.epochs=2").unwrap());
    let r = resolve(&e).unwrap();
    assert_eq!(r.config.prompt_size, 5);
    assert_eq!(r.config.train.lm_lr, 0.5);
    assert_eq!(r.config.train.epochs, 2);
    assert_eq!(r.config.data.counts.train, 12);
    assert!(r.explicit.contains("train.epochs"));
}

#[test]
fn optional_fields_accept_none() {
    let r = resolve(&entries(&[("train.grad_clip", "none")])).unwrap();
    assert_eq!(r.config.train.grad_clip, None);
    let r = resolve(&entries(&[("train.dataset_cap", "7")])).unwrap();
    assert_eq!(r.config.train.dataset_cap, Some(7));
}

#[test]
fn bad_entries_are_rejected() {
    for (k, v) in [
        ("train.no_such_key", "1"),
        ("train.epochs", "many"),
        ("train", "1"),
        ("train.precision", "f16"),
        ("train.batch_size", "0"),
    ] {
        assert!(resolve(&entries(&[(k, v)])).is_err(), "{k} = {v} accepted");
    }
    assert!(parse_override("no-equals-sign").is_err());
}
