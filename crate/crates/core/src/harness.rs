//! Experiment driver: run configuration, CSV ledgers, checkpoints, static
//! SVG charts, parameter sweeps and oracle tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    last_decile_mean, loglog_slope, Framework, ProtocolConfig, ProtocolOverrides, RegretLedger,
    Runner, RunnerState,
};
use crate::environments::{
    Environment, GridSpec, GridWorld, ObjectiveKind, Preset, DEFAULT_ENTROPY_FLOOR,
};
use crate::error::{Error, Result};
use crate::mdp::forward_rollout;
use crate::oracles::{concentration_run, dp_vs_grid_table, open_grid, pinsker_check, solver_feasibility, OracleTable};
use crate::solver::BregmanKind;

/// Header of `ledger.csv`. Bump [`LEDGER_SCHEMA_VERSION`] when it changes.
pub const LEDGER_HEADER: [&str; 10] = [
    "episode",
    "loss",
    "comparator_loss",
    "regret_cum",
    "rho_gap_l1",
    "rho_tilde_gap_l1",
    "lambda_final",
    "dual_iters",
    "g_final",
    "alpha_bar",
];
pub const LEDGER_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
/// Environment variable capping sweep parallelism.
pub const THREADS_ENV: &str = "PERIODIC_MDP_THREADS";

pub const DEFAULT_PRESET: Preset = Preset::MaxEntropySmall;

pub const LEDGER_FILE: &str = "ledger.csv";
pub const RESOLVED_FILE: &str = "config.resolved";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REGRET_CHART_FILE: &str = "regret.svg";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    /// Built-in layout; exclusive with `map` and `map_text`. With no source
    /// at all, [`DEFAULT_PRESET`] is used.
    pub preset: Option<Preset>,
    /// Path of a plain-text map.
    pub map: Option<PathBuf>,
    /// Inline map, as written to `config.resolved`.
    pub map_text: Option<String>,
    /// Episode length for custom maps; presets carry their own.
    pub horizon: Option<usize>,
    /// Objective for custom maps; presets carry their own.
    pub objective: Option<ObjectiveKind>,
    pub noise: f64,
    pub noisy_stay: bool,
    pub entropy_floor: f64,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            map: None,
            map_text: None,
            horizon: None,
            objective: None,
            noise: 0.1,
            noisy_stay: false,
            entropy_floor: DEFAULT_ENTROPY_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Episodes between checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    pub regret_chart: bool,
    /// Heatmap of the last occupancy snapshot; needs checkpoints.
    pub heatmaps: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoint_interval: 100,
            regret_chart: true,
            heatmaps: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub environment: EnvironmentConfig,
    pub protocol: ProtocolConfig,
    pub output: OutputConfig,
}

/// Command-line overrides applied on top of a loaded configuration.
#[derive(Clone, Debug, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub episodes: Option<usize>,
    pub out: Option<PathBuf>,
    pub framework: Option<Framework>,
    pub preset: Option<Preset>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn apply(&mut self, o: &RunOverrides) {
        if let Some(seed) = o.seed {
            self.protocol.seed = seed;
        }
        if let Some(t) = o.episodes {
            self.protocol.num_episodes = t;
        }
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
        }
        if let Some(f) = o.framework {
            self.protocol.framework = f;
        }
        if let Some(p) = o.preset {
            self.environment.preset = Some(p);
            self.environment.map = None;
            self.environment.map_text = None;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let env = &self.environment;
        let sources = [env.preset.is_some(), env.map.is_some(), env.map_text.is_some()];
        if sources.iter().filter(|&&s| s).count() > 1 {
            return Err(Error::Config(
                "environment takes at most one of preset, map, map_text".into(),
            ));
        }
        let custom = env.map.is_some() || env.map_text.is_some();
        if !custom && (env.horizon.is_some() || env.objective.is_some()) {
            return Err(Error::Config(
                "horizon and objective are fixed by the preset; use a map to change them".into(),
            ));
        }
        if custom && (env.horizon.is_none() || env.objective.is_none()) {
            return Err(Error::Config("custom maps need horizon and objective".into()));
        }
        if !(0.0..=1.0).contains(&env.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 1], got {}", env.noise)));
        }
        self.protocol.validate()
    }

    /// Copy that no longer depends on external files.
    pub fn resolved(&self) -> Result<Self> {
        self.validate()?;
        let mut out = self.clone();
        if out.environment.map.is_none() && out.environment.map_text.is_none() {
            out.environment.preset = Some(self.preset());
        }
        if let Some(path) = &self.environment.map {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            out.environment.map = None;
            out.environment.map_text = Some(text);
        }
        Ok(out)
    }

    /// Preset in effect when no map is given.
    fn preset(&self) -> Preset {
        self.environment.preset.unwrap_or(DEFAULT_PRESET)
    }

    fn grid(&self) -> Result<GridSpec> {
        let env = &self.environment;
        let mut spec = match (&env.map, &env.map_text) {
            (Some(path), _) => GridSpec::load_map(path, env.noise)?,
            (_, Some(text)) => GridSpec::parse_map(text, env.noise)?,
            _ => self.preset().grid(env.noise)?,
        };
        spec.noisy_stay = env.noisy_stay;
        Ok(spec)
    }

    pub fn build_environment(&self) -> Result<Environment> {
        self.validate()?;
        let env = &self.environment;
        let (horizon, objective) = match (env.horizon, env.objective) {
            (Some(h), Some(o)) => (h, o),
            _ => (self.preset().horizon(), self.preset().objective()),
        };
        Environment::from_spec(self.grid()?, horizon, objective, env.entropy_floor)
    }
}

/// One row of `ledger.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LedgerRow {
    pub episode: usize,
    pub loss: f64,
    pub comparator_loss: f64,
    pub regret_cum: f64,
    pub rho_gap_l1: f64,
    pub rho_tilde_gap_l1: Option<f64>,
    pub lambda_final: f64,
    pub dual_iters: usize,
    pub g_final: f64,
    pub alpha_bar: f64,
}

pub fn ledger_rows(ledger: &RegretLedger) -> Vec<LedgerRow> {
    ledger
        .records
        .iter()
        .map(|r| LedgerRow {
            episode: r.episode,
            loss: r.loss,
            comparator_loss: r.comparator_loss,
            regret_cum: r.regret_cum,
            rho_gap_l1: r.rho_gap,
            rho_tilde_gap_l1: r.rho_tilde_gap,
            lambda_final: r.diagnostics.lambda_final,
            dual_iters: r.diagnostics.dual_iters,
            g_final: r.diagnostics.g_final,
            alpha_bar: r.diagnostics.alpha_bar,
        })
        .collect()
}

/// Shortest representation that parses back to the same value.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_ledger(path: &Path, rows: &[LedgerRow]) -> Result<()> {
    let io = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(LEDGER_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.episode.to_string(),
            fmt_f64(r.loss),
            fmt_f64(r.comparator_loss),
            fmt_f64(r.regret_cum),
            fmt_f64(r.rho_gap_l1),
            r.rho_tilde_gap_l1.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.lambda_final),
            r.dual_iters.to_string(),
            fmt_f64(r.g_final),
            fmt_f64(r.alpha_bar),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a ledger, rejecting any header other than [`LEDGER_HEADER`].
pub fn read_ledger(path: &Path) -> Result<Vec<LedgerRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ledger(&text, path)
}

pub fn parse_ledger(text: &str, path: &Path) -> Result<Vec<LedgerRow>> {
    let parse_err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let schema = |column: &str| Error::Schema {
        path: path.to_path_buf(),
        column: column.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(parse_err)?.clone();
    for (i, expected) in LEDGER_HEADER.iter().enumerate() {
        match header.get(i) {
            Some(found) if found == *expected => {}
            Some(found) => {
                return Err(schema(&format!("{found:?} at position {i} (expected {expected:?})")));
            }
            None => return Err(schema(&format!("{expected:?} missing"))),
        }
    }
    if let Some(extra) = header.get(LEDGER_HEADER.len()) {
        return Err(schema(&format!("{extra:?} unexpected")));
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(parse_err)?;
        let field = |i: usize| -> &str { record.get(i).unwrap_or("") };
        let bad = |i: usize| {
            schema(&format!(
                "{} (row {}: {:?})",
                LEDGER_HEADER[i],
                line + 1,
                field(i)
            ))
        };
        let float = |i: usize| -> Result<f64> { field(i).parse::<f64>().map_err(|_| bad(i)) };
        let int = |i: usize| -> Result<usize> { field(i).parse::<usize>().map_err(|_| bad(i)) };
        rows.push(LedgerRow {
            episode: int(0)?,
            loss: float(1)?,
            comparator_loss: float(2)?,
            regret_cum: float(3)?,
            rho_gap_l1: float(4)?,
            rho_tilde_gap_l1: match field(5) {
                "" => None,
                _ => Some(float(5)?),
            },
            lambda_final: float(6)?,
            dual_iters: int(7)?,
            g_final: float(8)?,
            alpha_bar: float(9)?,
        });
    }
    Ok(rows)
}

/// Per-step state marginals of the population in the episode after
/// `episode`, under the true dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancySnapshot {
    pub episode: usize,
    /// `state_marginals[n][x]` for `n = 0..=N`.
    pub state_marginals: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub protocol: ProtocolConfig,
    /// Map of the environment, for heatmap layout.
    pub map: String,
    pub state: RunnerState,
    pub snapshots: Vec<OccupancySnapshot>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cp: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("checkpoint version {} is not {CHECKPOINT_VERSION}", cp.version),
            });
        }
        Ok(cp)
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

fn snapshot(env: &Environment, state: &RunnerState) -> Result<OccupancySnapshot> {
    let mu = forward_rollout(&state.policy, &state.rho_t, &env.kernel)?;
    let actions = env.dims().num_actions;
    Ok(OccupancySnapshot {
        episode: state.episode,
        state_marginals: mu.slices().iter().map(|s| s.state_marginal(actions)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub episodes: usize,
    pub final_regret: f64,
    pub loglog_slope: f64,
    pub last_decile_rho_gap: f64,
    pub comparator_gap: Option<f64>,
}

/// Writes `config.resolved`, runs the protocol with periodic checkpoints,
/// then writes `ledger.csv` and the requested charts. With `resume`, an
/// existing checkpoint of the same protocol configuration is continued.
///
/// On a solver failure the completed episodes are still written to the
/// ledger before the error is returned.
pub fn run(config: &RunConfig, resume: bool) -> Result<RunSummary> {
    let config = config.resolved()?;
    let dir = config.output.dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let resolved = format!(
        "# ledger schema {LEDGER_SCHEMA_VERSION}\n{}",
        config.to_toml_string()?
    );
    let resolved_path = dir.join(RESOLVED_FILE);
    fs::write(&resolved_path, resolved).map_err(|e| Error::io(&resolved_path, e))?;

    let env = config.build_environment()?;
    let map = env.world.spec().to_map();
    let mut runner = Runner::new(
        &env.kernel,
        &env.rho,
        env.objective.as_ref(),
        config.protocol,
        ProtocolOverrides::default(),
    )?;
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    let mut snapshots = Vec::new();
    if resume && checkpoint_path.exists() {
        let cp = Checkpoint::load(&checkpoint_path)?;
        if cp.protocol != config.protocol {
            return Err(Error::Config(format!(
                "{} was written by a different protocol configuration",
                checkpoint_path.display()
            )));
        }
        runner = runner.resume(cp.state)?;
        snapshots = cp.snapshots;
    }
    let interval = config.output.checkpoint_interval;
    let mut failure = None;
    while !runner.is_done() {
        if let Err(e) = runner.step() {
            failure = Some(e);
            break;
        }
        let state = runner.state();
        if interval > 0 && (state.episode % interval == 0 || runner.is_done()) {
            snapshots.push(snapshot(&env, state)?);
            Checkpoint {
                version: CHECKPOINT_VERSION,
                protocol: config.protocol,
                map: map.clone(),
                state: state.clone(),
                snapshots: snapshots.clone(),
            }
            .save(&checkpoint_path)?;
        }
    }
    let comparator_gap = runner.comparator().gap;
    let ledger = runner.into_ledger();
    let rows = ledger_rows(&ledger);
    write_ledger(&dir.join(LEDGER_FILE), &rows)?;
    if let Some(e) = failure {
        return Err(e);
    }
    if config.output.regret_chart {
        let label = config.protocol.framework.label().to_string();
        write_regret_chart(&dir.join(REGRET_CHART_FILE), &[series_from_rows(label, &rows)])?;
    }
    if config.output.heatmaps {
        if let Some(last) = snapshots.last() {
            let path = dir.join(format!("heatmap-{:05}.svg", last.episode));
            write_heatmap(&path, &map, last)?;
        }
    }
    let regret: Vec<f64> = rows.iter().map(|r| r.regret_cum).collect();
    Ok(RunSummary {
        out_dir: dir,
        episodes: rows.len(),
        final_regret: ledger.final_regret(),
        loglog_slope: loglog_slope(&regret),
        last_decile_rho_gap: ledger.last_decile_rho_gap(),
        comparator_gap,
    })
}

/// Numeric content of one chart line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartSeries {
    pub label: String,
    pub episode: Vec<usize>,
    pub regret: Vec<f64>,
}

pub fn series_from_rows(label: String, rows: &[LedgerRow]) -> ChartSeries {
    ChartSeries {
        label,
        episode: rows.iter().map(|r| r.episode).collect(),
        regret: rows.iter().map(|r| r.regret_cum).collect(),
    }
}

const DATA_OPEN: &str = "<metadata id=\"chart-data\"><![CDATA[";
const DATA_CLOSE: &str = "]]></metadata>";
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of cumulative periodic regret with the plotted series
/// embedded as JSON.
pub fn regret_chart_svg(series: &[ChartSeries]) -> Result<String> {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (80.0, 20.0, 30.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x_max = series
        .iter()
        .flat_map(|s| s.episode.iter().copied())
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let values = || series.iter().flat_map(|s| s.regret.iter().copied()).filter(|v| v.is_finite());
    let y_min = values().fold(0.0, f64::min);
    let mut y_max = values().fold(0.0, f64::max);
    if y_max <= y_min {
        y_max = y_min + 1.0;
    }
    let sx = |x: f64| left + pw * x / x_max;
    let sy = |y: f64| top + ph * (1.0 - (y - y_min) / (y_max - y_min));

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let data = serde_json::to_string(series).map_err(|e| Error::Config(e.to_string()))?;
    let _ = writeln!(out, "{DATA_OPEN}{data}{DATA_CLOSE}");
    let _ = writeln!(out, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>"
    );
    for k in 0..=4 {
        let fx = k as f64 / 4.0;
        let x = left + pw * fx;
        let y = top + ph * (1.0 - fx);
        let _ = writeln!(
            out,
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.0}</text>",
            top + ph + 18.0,
            x_max * fx
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3e}</text>",
            left - 6.0,
            y + 4.0,
            y_min + (y_max - y_min) * fx
        );
        let _ = writeln!(
            out,
            "<line x1=\"{left}\" x2=\"{:.1}\" y1=\"{y:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>",
            left + pw
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">episode</text>",
        left + pw / 2.0,
        h - 20.0
    );
    let _ = writeln!(
        out,
        "<text transform=\"translate(16 {:.1}) rotate(-90)\" text-anchor=\"middle\">cumulative periodic regret</text>",
        top + ph / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = s
            .episode
            .iter()
            .zip(&s.regret)
            .filter(|(_, r)| r.is_finite())
            .map(|(&e, &r)| format!("{:.2},{:.2}", sx(e as f64), sy(r)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        );
        let ly = top + 16.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            "<line x1=\"{:.1}\" x2=\"{:.1}\" y1=\"{ly:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            left + 12.0,
            left + 36.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            left + 42.0,
            ly + 4.0,
            escape_xml(&s.label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn write_regret_chart(path: &Path, series: &[ChartSeries]) -> Result<()> {
    fs::write(path, regret_chart_svg(series)?).map_err(|e| Error::io(path, e))
}

/// Recovers the series embedded by [`regret_chart_svg`].
pub fn parse_chart_data(svg: &str) -> Result<Vec<ChartSeries>> {
    let bad = |m: &str| Error::Config(format!("chart data block: {m}"));
    let start = svg.find(DATA_OPEN).ok_or_else(|| bad("missing"))? + DATA_OPEN.len();
    let len = svg[start..].find(DATA_CLOSE).ok_or_else(|| bad("unterminated"))?;
    serde_json::from_str(&svg[start..start + len]).map_err(|e| bad(&e.to_string()))
}

/// Small multiples of the per-step state distribution on the grid.
pub fn heatmap_svg(map: &str, snapshot: &OccupancySnapshot) -> Result<String> {
    let world = GridWorld::new(GridSpec::parse_map(map, 0.0)?)?;
    let spec = world.spec();
    if snapshot.state_marginals.iter().any(|m| m.len() != world.num_states()) {
        return Err(Error::DimensionMismatch {
            context: "heatmap snapshot",
            expected: world.num_states(),
            actual: snapshot.state_marginals.first().map_or(0, Vec::len),
        });
    }
    let horizon = snapshot.state_marginals.len().saturating_sub(1);
    let panels: Vec<usize> = if horizon <= 8 {
        (0..=horizon).collect()
    } else {
        let mut p: Vec<usize> = (0..=8).map(|k| (k * horizon + 4) / 8).collect();
        p.dedup();
        p
    };
    let cell = 12.0;
    let pw = cell * spec.width as f64;
    let ph = cell * spec.height as f64;
    let gap = 14.0;
    let w = panels.len() as f64 * (pw + gap) + gap;
    let h = ph + 56.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(out, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{gap}\" y=\"14\">state distribution, episode {}</text>",
        snapshot.episode + 1
    );
    for (k, &n) in panels.iter().enumerate() {
        let ox = gap + k as f64 * (pw + gap);
        let oy = 24.0;
        let marg = &snapshot.state_marginals[n];
        let peak = marg.iter().copied().fold(0.0, f64::max).max(1e-300);
        for r in 0..spec.height {
            for c in 0..spec.width {
                let fill = match world.state((r, c)) {
                    None => "#555555".to_string(),
                    Some(s) => {
                        let v = (marg[s] / peak).clamp(0.0, 1.0);
                        let shade = |hi: f64, lo: f64| (hi + (lo - hi) * v).round() as u8;
                        format!("#{:02x}{:02x}{:02x}", shade(255.0, 8.0), shade(255.0, 48.0), shade(255.0, 107.0))
                    }
                };
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\"/>",
                    ox + c as f64 * cell,
                    oy + r as f64 * cell
                );
            }
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">n = {n}</text>",
            ox + pw / 2.0,
            oy + ph + 16.0
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn write_heatmap(path: &Path, map: &str, snapshot: &OccupancySnapshot) -> Result<()> {
    fs::write(path, heatmap_svg(map, snapshot)?).map_err(|e| Error::io(path, e))
}

fn ledger_label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ledger".into())
}

/// One regret chart over all ledgers plus, for each ledger whose directory
/// holds a checkpoint with snapshots, a heatmap of the last snapshot.
pub fn plot_ledgers(ledgers: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if ledgers.is_empty() {
        return Err(Error::Config("no ledgers to plot".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut series = Vec::with_capacity(ledgers.len());
    let mut written = Vec::new();
    for (i, path) in ledgers.iter().enumerate() {
        let rows = read_ledger(path)?;
        let mut label = ledger_label(path);
        if series.iter().any(|s: &ChartSeries| s.label == label) {
            label = format!("{label} ({})", i + 1);
        }
        let checkpoint = path.with_file_name(CHECKPOINT_FILE);
        if checkpoint.exists() {
            let cp = Checkpoint::load(&checkpoint)?;
            if let Some(last) = cp.snapshots.last() {
                let file = out_dir.join(format!("heatmap-{}.svg", sanitize(&label)));
                write_heatmap(&file, &cp.map, last)?;
                written.push(file);
            }
        }
        series.push(series_from_rows(label, &rows));
    }
    let chart = out_dir.join(REGRET_CHART_FILE);
    write_regret_chart(&chart, &series)?;
    written.insert(0, chart);
    Ok(written)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Axes of a sweep; an omitted axis keeps the base configuration's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub seeds: Vec<u64>,
    pub episodes: Vec<usize>,
    pub eta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub noise: Vec<f64>,
    pub frameworks: Vec<Framework>,
}

impl SweepGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Every combination in a fixed order: seed outermost, framework innermost.
    pub fn expand(&self, base: &RunConfig) -> Vec<SweepPoint> {
        fn or<T: Clone>(axis: &[T], default: T) -> Vec<T> {
            if axis.is_empty() {
                vec![default]
            } else {
                axis.to_vec()
            }
        }
        let p = &base.protocol;
        let mut out = Vec::new();
        for &seed in &or(&self.seeds, p.seed) {
            for &episodes in &or(&self.episodes, p.num_episodes) {
                for &eta in &or(&self.eta, p.eta) {
                    for &gamma in &or(&self.gamma, p.gamma) {
                        for &noise in &or(&self.noise, base.environment.noise) {
                            for &framework in &or(&self.frameworks, p.framework) {
                                out.push(SweepPoint {
                                    seed,
                                    episodes,
                                    eta,
                                    gamma,
                                    noise,
                                    framework,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub seed: u64,
    pub episodes: usize,
    pub eta: f64,
    pub gamma: f64,
    pub noise: f64,
    pub framework: Framework,
}

/// Run seed derived from the base seed and the grid seed only, so that
/// runs differing in other axes share their randomness.
pub fn derive_seed(base: u64, grid_seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(grid_seed);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub point: SweepPoint,
    pub run_seed: u64,
    pub dir: PathBuf,
    pub outcome: std::result::Result<RunSummary, String>,
}

/// Worker count from [`THREADS_ENV`], defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every grid point into `out_dir/run-XXXX` and writes `summary.csv`.
/// A failing run is recorded in its row and the sweep carries on.
pub fn sweep(base: &RunConfig, grid: &SweepGrid, out_dir: &Path) -> Result<Vec<SweepRow>> {
    base.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let points = grid.expand(base);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(index, &point)| {
                let dir = out_dir.join(format!("run-{index:04}"));
                let run_seed = derive_seed(base.protocol.seed, point.seed);
                let mut config = base.clone();
                config.protocol.seed = run_seed;
                config.protocol.num_episodes = point.episodes;
                config.protocol.eta = point.eta;
                config.protocol.gamma = point.gamma;
                config.protocol.framework = point.framework;
                config.environment.noise = point.noise;
                config.output.dir = dir.clone();
                let outcome = run(&config, false).map_err(|e| e.to_string());
                SweepRow {
                    index,
                    point,
                    run_seed,
                    dir,
                    outcome,
                }
            })
            .collect()
    });
    write_summary(&out_dir.join(SUMMARY_FILE), &rows)?;
    Ok(rows)
}

pub const SUMMARY_HEADER: [&str; 14] = [
    "run",
    "dir",
    "seed",
    "run_seed",
    "framework",
    "episodes",
    "eta",
    "gamma",
    "noise",
    "status",
    "final_regret",
    "loglog_slope",
    "last_decile_rho_gap",
    "error",
];

pub fn write_summary(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let io = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(SUMMARY_HEADER).map_err(io)?;
    for r in rows {
        let p = &r.point;
        let (status, regret, slope, gap, error) = match &r.outcome {
            Ok(s) => (
                "ok",
                fmt_f64(s.final_regret),
                fmt_f64(s.loglog_slope),
                fmt_f64(s.last_decile_rho_gap),
                String::new(),
            ),
            Err(e) => ("failed", String::new(), String::new(), String::new(), e.clone()),
        };
        w.write_record([
            r.index.to_string(),
            r.dir.display().to_string(),
            p.seed.to_string(),
            r.run_seed.to_string(),
            p.framework.short_name().to_string(),
            p.episodes.to_string(),
            fmt_f64(p.eta),
            fmt_f64(p.gamma),
            fmt_f64(p.noise),
            status.to_string(),
            regret,
            slope,
            gap,
            error,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean `rho_gap_l1` over the last tenth of a ledger.
pub fn ledger_last_decile_gap(rows: &[LedgerRow]) -> f64 {
    last_decile_mean(&rows.iter().map(|r| r.rho_gap_l1).collect::<Vec<_>>())
}

pub fn ledger_slope(rows: &[LedgerRow]) -> f64 {
    loglog_slope(&rows.iter().map(|r| r.regret_cum).collect::<Vec<_>>())
}

/// Sizes of the oracle suite; [`OracleSizes::full`] matches the acceptance
/// protocol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleSizes {
    pub feasibility_instances: usize,
    pub grid_instances: usize,
    pub grid_step: f64,
    pub pinsker_pairs: usize,
    pub concentration_runs: usize,
}

impl OracleSizes {
    pub fn full() -> Self {
        Self {
            feasibility_instances: 1000,
            grid_instances: 20,
            grid_step: 0.02,
            pinsker_pairs: 1000,
            concentration_runs: 100,
        }
    }

    pub fn quick() -> Self {
        Self {
            feasibility_instances: 100,
            grid_instances: 5,
            grid_step: 0.05,
            pinsker_pairs: 100,
            concentration_runs: 10,
        }
    }
}

/// Brute-force oracle tables.
pub fn oracle_tables(sizes: OracleSizes, seed: u64) -> Result<Vec<OracleTable>> {
    let mut tables = Vec::new();
    let f = solver_feasibility(sizes.feasibility_instances, seed, 1e-3);
    tables.push(OracleTable {
        title: "flow feasibility of solver outputs (residual <= 1e-10, G <= 1e-3)".into(),
        header: ["instances", "failures", "proven infeasible", "max residual", "max G"]
            .map(String::from)
            .to_vec(),
        rows: vec![vec![
            f.instances.to_string(),
            f.failures.to_string(),
            f.infeasible.to_string(),
            format!("{:.3e}", f.max_residual),
            format!("{:.3e}", f.max_g),
        ]],
        passed: f.failures == 0,
    });
    tables.push(dp_vs_grid_table(sizes.grid_instances, sizes.grid_step, 0.05, seed)?);
    let mut rows = Vec::new();
    let mut passed = true;
    for kind in [BregmanKind::PolicyGamma, BregmanKind::KlOccupancy] {
        let s = pinsker_check(kind, sizes.pinsker_pairs, seed, 1e-12)?;
        passed &= s.violations == 0;
        rows.push(vec![
            format!("{kind:?}"),
            s.pairs.to_string(),
            s.violations.to_string(),
            format!("{:.3e}", s.min_margin),
        ]);
    }
    tables.push(OracleTable {
        title: "Pinsker-type lower bound D >= 0.5 sup_n ||mu_n - mu'_n||_1^2".into(),
        header: ["divergence", "pairs", "violations", "min margin"].map(String::from).to_vec(),
        rows,
        passed,
    });
    let spec = open_grid(5, 0.1)?;
    let runs: Vec<_> = (0..sizes.concentration_runs as u64)
        .into_par_iter()
        .map(|i| concentration_run(&spec, 10, 300, 0.1, seed.wrapping_add(i)))
        .collect::<Result<_>>()?;
    let held = runs.iter().filter(|r| r.violations == 0).count();
    let needed = (sizes.concentration_runs * 9).div_ceil(10);
    tables.push(OracleTable {
        title: "simultaneous L1 concentration of the kernel estimate (5x5 grid, T = 300, delta = 0.1)".into(),
        header: ["runs", "bound held", "needed", "max error/bound"].map(String::from).to_vec(),
        rows: vec![vec![
            runs.len().to_string(),
            held.to_string(),
            needed.to_string(),
            format!("{:.4}", runs.iter().map(|r| r.max_ratio).fold(0.0, f64::max)),
        ]],
        passed: held >= needed,
    });
    Ok(tables)
}
