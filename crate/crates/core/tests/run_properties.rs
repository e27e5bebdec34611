use proptest::prelude::*;
use retformer::run::*;

fn config(text: &str) -> RunConfig {
    parse_config(text, &[]).unwrap().config
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn last_assignment_wins(values in proptest::collection::vec(1usize..500, 1..6)) {
        let text: String = values.iter().map(|v| format!("epochs = {v}\n")).collect();
        let parsed = parse_config(&text, &[]).unwrap();
        prop_assert_eq!(parsed.config.train.epochs, *values.last().unwrap());
        prop_assert_eq!(parsed.warnings.len(), values.len() - 1);
    }

    #[test]
    fn flags_override_the_file(file in 1u64..1000, flag in 1u64..1000) {
        let parsed = parse_config(&format!("seed = {file}\n"), &[("seed".into(), flag.to_string())]).unwrap();
        prop_assert_eq!(parsed.config.seed, flag);
    }

    #[test]
    fn grouping_is_accepted_iff_heads_divide(heads in 1usize..30, groups in 1usize..30) {
        let result = parse_config(&format!("n_heads = {heads}\nn_groups = {groups}\n"), &[]);
        prop_assert_eq!(result.is_ok(), heads % groups == 0);
    }
}

#[test]
fn every_documented_key_is_accepted() {
    for (key, _) in KEYS {
        let err = parse_config(&format!("{key} = ???\n"), &[]);
        if let Err(e) = err {
            assert!(!e.to_string().contains("unknown key"), "{key}: {e}");
        }
    }
}

#[test]
fn single_point_sweep_gives_one_row() {
    let mut cfg = config("image_size = 8\nsynth_n_per_class = 10\nepochs = 2\nbatch_size = 8\nk1 = 2\n");
    cfg.grid = vec![8];
    let a = sweep_csv(&sweep(&cfg));
    assert_eq!(a.lines().count(), 2);
    assert_eq!(a, sweep_csv(&sweep(&cfg)));
}

#[test]
fn resolution_sweep_improves_from_10_to_20() {
    let cfg = config("synth_n_per_class = 100\nsynth_effect = 0.3\nepochs = 40\nk1 = 3\ngrid = 10, 20\nseed = 2\n");
    let points = sweep(&cfg);
    let (low, high) = (points[0].result.clone().unwrap(), points[1].result.clone().unwrap());
    assert!(high.1 >= low.1, "validation accuracy at 10: {}, at 20: {}", low.1, high.1);
}
