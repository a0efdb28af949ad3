use std::fs;
use std::path::{Path, PathBuf};

use periodic_mdp_core::algorithms::{Framework, ProtocolOverrides, Runner};
use periodic_mdp_core::environments::{ObjectiveKind, Preset};
use periodic_mdp_core::error::Error;
use periodic_mdp_core::harness::*;
use periodic_mdp_core::solver::AlphaBar;

fn quick_config(dir: &Path, episodes: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.environment.preset = Some(Preset::MaxEntropySmall);
    c.protocol.num_episodes = episodes;
    c.protocol.seed = 7;
    c.output.dir = dir.to_path_buf();
    c.output.checkpoint_interval = 5;
    c
}

#[test]
fn default_config_round_trips() {
    let c = RunConfig::default();
    let text = c.to_toml_string().unwrap();
    let back = RunConfig::from_toml_str(&text).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_toml_string().unwrap(), text);
}

#[test]
fn edited_config_round_trips() {
    let mut c = RunConfig::default();
    c.environment.preset = None;
    c.environment.map_text = Some("S..\n.#.\n..T\n".into());
    c.environment.horizon = Some(6);
    c.environment.objective = Some(ObjectiveKind::Obstacles);
    c.environment.noise = 0.05;
    c.protocol.alpha_bar = AlphaBar::Search;
    c.protocol.framework = Framework::UnknownRho;
    c.protocol.restarted_agent = Some(3);
    c.protocol.eta = 0.1 + 0.2;
    c.output.checkpoint_interval = 0;
    c.validate().unwrap();
    let back = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn alpha_bar_accepts_number_or_auto() {
    let c = RunConfig::from_toml_str("[protocol]\nalpha_bar = \"auto\"\n").unwrap();
    assert_eq!(c.protocol.alpha_bar, AlphaBar::Search);
    let c = RunConfig::from_toml_str("[protocol]\nalpha_bar = 0.25\n").unwrap();
    assert_eq!(c.protocol.alpha_bar, AlphaBar::Fixed(0.25));
    let c = RunConfig::from_toml_str("[protocol]\nalpha_bar = 1\n").unwrap();
    assert_eq!(c.protocol.alpha_bar, AlphaBar::Fixed(1.0));
    assert!(RunConfig::from_toml_str("[protocol]\nalpha_bar = \"search\"\n").is_err());
}

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    for text in [
        "colour = 1\n",
        "[environment]\nwalls = 3\n",
        "[protocol]\nlearning_rate = 0.1\n",
        "[protocol.dual]\nstep = 0.1\n",
        "[protocol.comparator]\nbudgett = 0.1\n",
        "[output]\nformat = \"png\"\n",
    ] {
        let err = RunConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("unknown field"), "{text}: {err}");
    }
}

#[test]
fn environment_takes_at_most_one_source() {
    let mut c = RunConfig::default();
    c.validate().unwrap();
    assert_eq!(c.resolved().unwrap().environment.preset, Some(DEFAULT_PRESET));
    c.environment.preset = Some(Preset::ObstaclesSmall);
    c.environment.map_text = Some("S.\n".into());
    assert!(c.validate().is_err());
    c.environment.preset = None;
    assert!(c.validate().is_err(), "custom map without horizon");
    c.environment.horizon = Some(3);
    c.environment.objective = Some(ObjectiveKind::MaxEntropy);
    c.validate().unwrap();
}

#[test]
fn overrides_replace_fields() {
    let mut c = RunConfig::default();
    c.environment.preset = None;
    c.environment.map = Some("x.map".into());
    c.apply(&RunOverrides {
        seed: Some(9),
        episodes: Some(10),
        out: Some("o".into()),
        framework: Some(Framework::EpisodicBaseline),
        preset: Some(Preset::ObstaclesSmall),
    });
    assert_eq!(c.protocol.seed, 9);
    assert_eq!(c.protocol.num_episodes, 10);
    assert_eq!(c.output.dir, PathBuf::from("o"));
    assert_eq!(c.protocol.framework, Framework::EpisodicBaseline);
    assert_eq!(c.environment.preset, Some(Preset::ObstaclesSmall));
    assert_eq!(c.environment.map, None);
}

#[test]
fn missing_config_names_the_path() {
    let err = RunConfig::load(Path::new("/no/such/run.toml")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/no/such/run.toml"));
}

fn sample_rows() -> Vec<LedgerRow> {
    (1..=4)
        .map(|t| LedgerRow {
            episode: t,
            loss: -1.0 / 3.0 * t as f64,
            comparator_loss: -0.1,
            regret_cum: 1e-17 + t as f64 * 0.7,
            rho_gap_l1: 0.1 * t as f64,
            rho_tilde_gap_l1: (t % 2 == 0).then_some(1e-300),
            lambda_final: 3.25,
            dual_iters: t * 11,
            g_final: -2.5e-4,
            alpha_bar: 0.1,
        })
        .collect()
}

#[test]
fn ledger_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.csv");
    let rows = sample_rows();
    write_ledger(&path, &rows).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "episode,loss,comparator_loss,regret_cum,rho_gap_l1,rho_tilde_gap_l1,lambda_final,dual_iters,g_final,alpha_bar"
    );
    assert_eq!(read_ledger(&path).unwrap(), rows);
}

#[test]
fn schema_errors_name_the_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.csv");
    write_ledger(&path, &sample_rows()).unwrap();
    let good = fs::read_to_string(&path).unwrap();

    let renamed = good.replacen("rho_gap_l1,", "rho_gap,", 1);
    let err = parse_ledger(&renamed, &path).unwrap_err();
    assert!(matches!(&err, Error::Schema { column, .. } if column.contains("rho_gap")), "{err}");

    let truncated = good.replacen(",alpha_bar", "", 1);
    let err = parse_ledger(&truncated, &path).unwrap_err().to_string();
    assert!(err.contains("alpha_bar"), "{err}");

    let extra = good.replacen("alpha_bar", "alpha_bar,notes", 1);
    let err = parse_ledger(&extra, &path).unwrap_err().to_string();
    assert!(err.contains("notes"), "{err}");

    let mut lines: Vec<String> = good.lines().map(String::from).collect();
    let mut fields: Vec<&str> = lines[2].split(',').collect();
    fields[7] = "many";
    lines[2] = fields.join(",");
    let err = parse_ledger(&lines.join("\n"), &path).unwrap_err().to_string();
    assert!(err.contains("dual_iters"), "{err}");
}

#[test]
fn run_writes_artifacts_and_honors_episode_override() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = quick_config(dir.path(), 50);
    c.apply(&RunOverrides {
        episodes: Some(10),
        ..Default::default()
    });
    let summary = run(&c, false).unwrap();
    assert_eq!(summary.episodes, 10);
    let rows = read_ledger(&dir.path().join(LEDGER_FILE)).unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.last().unwrap().regret_cum, summary.final_regret);
    assert!(dir.path().join(RESOLVED_FILE).exists());
    assert!(dir.path().join(REGRET_CHART_FILE).exists());
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
    assert!(dir.path().join("heatmap-00010.svg").exists());
    let cp = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(cp.snapshots.iter().map(|s| s.episode).collect::<Vec<_>>(), [5, 10]);
    for m in &cp.snapshots[1].state_marginals {
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn resolved_config_reproduces_the_ledger() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    run(&quick_config(first.path(), 8), false).unwrap();
    let mut again = RunConfig::load(&first.path().join(RESOLVED_FILE)).unwrap();
    again.output.dir = second.path().to_path_buf();
    run(&again, false).unwrap();
    let a = fs::read(first.path().join(LEDGER_FILE)).unwrap();
    let b = fs::read(second.path().join(LEDGER_FILE)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn custom_map_is_inlined_in_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("room.map");
    fs::write(&map, "S..\n.#.\n..T\n").unwrap();
    let mut c = quick_config(&dir.path().join("out"), 3);
    c.environment.preset = None;
    c.environment.map = Some(map.clone());
    c.environment.horizon = Some(4);
    c.environment.objective = Some(ObjectiveKind::Obstacles);
    run(&c, false).unwrap();
    fs::remove_file(&map).unwrap();
    let resolved = RunConfig::load(&dir.path().join("out").join(RESOLVED_FILE)).unwrap();
    assert_eq!(resolved.environment.map, None);
    assert_eq!(resolved.environment.map_text.as_deref(), Some("S..\n.#.\n..T\n"));
    resolved.build_environment().unwrap();
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let c = quick_config(full.path(), 12);
    run(&c, false).unwrap();

    let part = tempfile::tempdir().unwrap();
    let mut c2 = c.clone();
    c2.output.dir = part.path().to_path_buf();
    let env = c2.build_environment().unwrap();
    let mut runner = Runner::new(
        &env.kernel,
        &env.rho,
        env.objective.as_ref(),
        c2.protocol,
        ProtocolOverrides::default(),
    )
    .unwrap();
    for _ in 0..5 {
        runner.step().unwrap();
    }
    let cp = Checkpoint {
        version: CHECKPOINT_VERSION,
        protocol: c2.protocol,
        map: env.world.spec().to_map(),
        state: runner.state().clone(),
        snapshots: Vec::new(),
    };
    let text = serde_json::to_string(&cp).unwrap();
    fs::write(part.path().join(CHECKPOINT_FILE), text).unwrap();
    run(&c2, true).unwrap();
    assert_eq!(
        fs::read(full.path().join(LEDGER_FILE)).unwrap(),
        fs::read(part.path().join(LEDGER_FILE)).unwrap()
    );
}

#[test]
fn resume_rejects_a_different_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let c = quick_config(dir.path(), 5);
    run(&c, false).unwrap();
    let mut other = c.clone();
    other.protocol.eta = 0.5;
    let err = run(&other, true).unwrap_err().to_string();
    assert!(err.contains("different protocol"), "{err}");
}

#[test]
fn chart_data_block_matches_the_ledgers() {
    let root = tempfile::tempdir().unwrap();
    let mut ledgers = Vec::new();
    for f in [Framework::KnownRho, Framework::UnknownRho, Framework::EpisodicBaseline] {
        let dir = root.path().join(f.short_name());
        let mut c = quick_config(&dir, 6);
        c.protocol.framework = f;
        run(&c, false).unwrap();
        ledgers.push(dir.join(LEDGER_FILE));
    }
    let out = root.path().join("plots");
    let written = plot_ledgers(&ledgers, &out).unwrap();
    assert_eq!(written[0], out.join(REGRET_CHART_FILE));
    assert_eq!(written.len(), 4, "chart plus one heatmap per run");
    let svg = fs::read_to_string(&written[0]).unwrap();
    let series = parse_chart_data(&svg).unwrap();
    assert_eq!(series.len(), 3);
    assert_eq!(
        series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>(),
        ["k", "u", "baseline"]
    );
    for (s, path) in series.iter().zip(&ledgers) {
        let rows = read_ledger(path).unwrap();
        assert_eq!(s.regret, rows.iter().map(|r| r.regret_cum).collect::<Vec<_>>());
        assert_eq!(s.episode, rows.iter().map(|r| r.episode).collect::<Vec<_>>());
        assert!(svg.contains(&format!(">{}</text>", s.label)));
    }
}

#[test]
fn single_ledger_gives_one_chart() {
    let root = tempfile::tempdir().unwrap();
    let mut c = quick_config(&root.path().join("run"), 4);
    c.output.checkpoint_interval = 0;
    run(&c, false).unwrap();
    let out = root.path().join("plots");
    let written = plot_ledgers(&[root.path().join("run").join(LEDGER_FILE)], &out).unwrap();
    assert_eq!(written, [out.join(REGRET_CHART_FILE)]);
}

#[test]
fn plot_reports_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.csv");
    fs::write(&path, "episode,loss\n1,2\n").unwrap();
    let err = plot_ledgers(&[path], &dir.path().join("plots")).unwrap_err().to_string();
    assert!(err.contains("comparator_loss"), "{err}");
}

#[test]
fn sweep_runs_the_product_and_summarizes() {
    let root = tempfile::tempdir().unwrap();
    let base = quick_config(root.path(), 1);
    let grid = SweepGrid {
        seeds: vec![1, 2],
        episodes: vec![4, 6],
        ..Default::default()
    };
    let rows = sweep(&base, &grid, root.path()).unwrap();
    assert_eq!(rows.len(), 4);
    let mut reader = csv::Reader::from_path(root.path().join(SUMMARY_FILE)).unwrap();
    let header = reader.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 4);
    for rec in &records {
        assert_eq!(&rec[col("status")], "ok");
        let ledger = read_ledger(&PathBuf::from(&rec[col("dir")]).join(LEDGER_FILE)).unwrap();
        assert_eq!(ledger.len().to_string(), rec[col("episodes")]);
        let slope: f64 = rec[col("loglog_slope")].parse().unwrap();
        assert!((slope - ledger_slope(&ledger)).abs() <= 1e-9);
        let gap: f64 = rec[col("last_decile_rho_gap")].parse().unwrap();
        assert!((gap - ledger_last_decile_gap(&ledger)).abs() <= 1e-9);
    }
    assert_eq!(rows[0].run_seed, rows[1].run_seed, "same grid seed, same run seed");
    assert_ne!(rows[0].run_seed, rows[2].run_seed);
}

#[test]
fn sweep_records_failures_and_continues() {
    let root = tempfile::tempdir().unwrap();
    let base = quick_config(root.path(), 3);
    let grid = SweepGrid {
        eta: vec![-1.0, 0.01],
        ..Default::default()
    };
    let rows = sweep(&base, &grid, root.path()).unwrap();
    assert!(rows[0].outcome.is_err());
    assert!(rows[1].outcome.is_ok());
    let text = fs::read_to_string(root.path().join(SUMMARY_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains("failed"));
    assert!(lines[2].contains(",ok,"));
}

#[test]
fn grid_expansion_keeps_base_values_for_missing_axes() {
    let base = RunConfig::default();
    let grid = SweepGrid {
        frameworks: vec![Framework::KnownRho, Framework::UnknownRho],
        noise: vec![0.0, 0.1, 0.2],
        ..Default::default()
    };
    let points = grid.expand(&base);
    assert_eq!(points.len(), 6);
    assert!(points.iter().all(|p| p.seed == base.protocol.seed && p.gamma == base.protocol.gamma));
    assert_eq!(points[1].framework, Framework::UnknownRho);
    assert_eq!(points[2].noise, 0.1);
}

#[test]
fn derived_seeds_are_stable_and_distinct() {
    assert_eq!(derive_seed(0, 3), derive_seed(0, 3));
    let seeds: std::collections::HashSet<u64> = (0..100).map(|s| derive_seed(0, s)).collect();
    assert_eq!(seeds.len(), 100);
    assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
}

#[test]
fn quick_oracle_tables_pass() {
    let tables = oracle_tables(OracleSizes::quick(), 3).unwrap();
    assert_eq!(tables.len(), 4);
    for t in &tables {
        assert!(t.passed, "{}", t.render());
        assert!(!t.rows.is_empty());
    }
}
