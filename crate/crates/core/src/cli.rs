//! Command-line entry point: argument parsing, config loading, run manifests
//! and the `verify` invariant matrix.

use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::acstruct::{random_structure, random_tangent, random_trigonometric_structure, shear_sine, standard_structure, ACField};
use crate::error::{NijError, Result};
use crate::eulerlagrange::{
    adapted_point, compare, deri_check, el_radius_sweep, el_tensor_from_jets, functional_switch_residual, libp_check,
    random_el_jet, random_gamma_jet, ElReading,
};
use crate::flow::{run_flow, FlowConfig};
use crate::grid::{bump, read_snapshot, spectral_derivative, Field, Grid, Snapshot};
use crate::jets::{correction_coeffs, random_jetdata, verify_chart, JetData};
use crate::scalar::{cq, SqMat};
use crate::variation::{energy, probe_directions, Functional, Variation};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "nijlab", version, about = "Nijenhuis energies of almost complex structures on flat tori")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for JSON/CSV results and the run manifest.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["standard", "shear", "file"])]
    pub family: Option<String>,
    #[arg(long, global = true, value_parser = ["N", "Ntilde"])]
    pub functional: Option<String>,
    #[arg(long, global = true)]
    pub res: Option<usize>,
    #[arg(long, global = true, value_parser = parse_n)]
    pub n: Option<usize>,
}

fn parse_n(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n @ 2..=3) => Ok(n),
        _ => Err(format!("expected 2 or 3, got {s:?}")),
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Both energies of the configured structure.
    Energy,
    /// First variation against central differences along the retraction.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        /// Comma-separated step sizes; one CSV row per step and direction.
        #[arg(long, value_delimiter = ',')]
        eps_sweep: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        directions: usize,
    },
    /// Adapted chart for random rational jets, or at a grid point.
    Coords {
        /// JSON jet document (rational `[num, den]` pairs).
        #[arg(long, conflicts_with = "point")]
        jets: Option<PathBuf>,
        /// Grid point of the configured structure.
        #[arg(long)]
        point: Option<usize>,
    },
    /// Euler–Lagrange tensor at a point and its bump comparison.
    ElResidual {
        #[arg(long, default_value_t = 0)]
        point: usize,
        /// Comma-separated bump radii.
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.1,0.05")]
        radius_sweep: Vec<f64>,
        #[arg(long, value_parser = ["as-printed", "consistent"], default_value = "as-printed")]
        reading: String,
    },
    /// Gradient descent with trace CSV and snapshots.
    Flow,
    /// Invariant checks.
    Verify {
        #[arg(long, value_parser = ["grid", "acstruct", "nijenhuis", "variation", "coords", "el", "flow"])]
        suite: Option<String>,
        #[arg(long)]
        all: bool,
    },
}

/// Effective configuration; file values override defaults, flags override both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub family: String,
    pub n: usize,
    pub res: usize,
    pub amp: f64,
    /// Snapshot path for `family = "file"`.
    pub file: Option<PathBuf>,
    pub seed: u64,
    pub functional: Functional,
    pub flow: FlowConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            family: "shear".into(),
            n: 2,
            res: 8,
            amp: 0.3,
            file: None,
            seed: 0,
            functional: Functional::Ntilde,
            flow: FlowConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(common: &CommonArgs) -> Result<Self> {
        let mut cfg: RunConfig = match &common.config {
            Some(path) => serde_json::from_str(&fs::read_to_string(path)?)
                .map_err(|e| NijError::InvalidConfig(format!("{}: {e}", path.display())))?,
            None => RunConfig::default(),
        };
        if let Some(f) = &common.family {
            cfg.family = f.clone();
        }
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(f) = &common.functional {
            cfg.functional = f.parse()?;
        }
        if let Some(r) = common.res {
            cfg.res = r;
        }
        if let Some(n) = common.n {
            cfg.n = n;
        }
        cfg.flow.functional = cfg.functional;
        cfg.flow.seed = cfg.seed;
        if !["standard", "shear", "file"].contains(&cfg.family.as_str()) {
            return Err(NijError::InvalidConfig(format!("unknown family {:?}", cfg.family)));
        }
        cfg.flow.validate()?;
        Ok(cfg)
    }

    pub fn structure(&self) -> Result<ACField> {
        match self.family.as_str() {
            "standard" => Ok(standard_structure(Grid::new(self.n, self.res)?)),
            "shear" => Ok(shear_sine(Grid::new(self.n, self.res)?, self.amp)),
            _ => {
                let path = self.file.as_ref().ok_or_else(|| NijError::InvalidConfig("family \"file\" needs \"file\"".into()))?;
                match read_snapshot(BufReader::new(fs::File::open(path)?))? {
                    Snapshot::Real(f) => ACField::new(f),
                    Snapshot::Complex(_) => Err(NijError::Snapshot("expected a real endomorphism field".into())),
                }
            }
        }
    }
}

/// `sha256` of the canonical JSON (keys sorted at every level).
pub fn config_hash(value: &Value) -> String {
    fn canonical(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                Value::Object(keys.into_iter().map(|k| (k.clone(), canonical(&m[k]))).collect())
            }
            Value::Array(a) => Value::Array(a.iter().map(canonical).collect()),
            other => other.clone(),
        }
    }
    let bytes = serde_json::to_vec(&canonical(value)).expect("json value serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_hash: String,
    pub config: Value,
    pub seed: u64,
    pub versions: Value,
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
    pub exit_code: i32,
}

/// One invariant check of the `verify` matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(suite: &str, name: &str, passed: bool, detail: impl Into<String>) -> Check {
    Check { suite: suite.into(), name: name.into(), passed, detail: detail.into() }
}

struct Outcome {
    result: Value,
    passed: bool,
    extra_outputs: Vec<PathBuf>,
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Ok(t) = std::env::var("NIJLAB_THREADS") {
        match t.parse::<usize>() {
            Ok(k) if k > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
            }
            _ => {
                eprintln!("error: NIJLAB_THREADS must be a positive integer, got {t:?}");
                return EXIT_USAGE;
            }
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Energy => "energy",
        Command::GradCheck { .. } => "grad-check",
        Command::Coords { .. } => "coords",
        Command::ElResidual { .. } => "el-residual",
        Command::Flow => "flow",
        Command::Verify { .. } => "verify",
    }
}

fn run(cli: &Cli) -> Result<i32> {
    let start = Instant::now();
    let cfg = RunConfig::load(&cli.common)?;
    let out_dir = cli.common.out.clone();
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir)?;
    }
    let outcome = match &cli.command {
        Command::Energy => run_energy(&cfg)?,
        Command::GradCheck { eps, eps_sweep, directions } => {
            run_grad_check(&cfg, *eps, eps_sweep, *directions, out_dir.as_deref())?
        }
        Command::Coords { jets, point } => run_coords(&cfg, jets.as_deref(), *point)?,
        Command::ElResidual { point, radius_sweep, reading } => run_el(&cfg, *point, radius_sweep, reading)?,
        Command::Flow => run_flow_cmd(&cfg, out_dir.as_deref())?,
        Command::Verify { suite, all } => {
            let suites: Vec<&str> = match (suite, all) {
                (Some(s), false) => vec![s.as_str()],
                (None, true) => SUITES.to_vec(),
                _ => return Err(NijError::InvalidConfig("verify needs exactly one of --suite or --all".into())),
            };
            run_verify(&cfg, &suites)?
        }
    };
    let code = if outcome.passed { EXIT_OK } else { EXIT_VERIFY };
    let text = serde_json::to_string_pretty(&outcome.result)?;
    let config = serde_json::to_value(&cfg)?;
    let mut manifest = RunManifest {
        subcommand: subcommand_name(&cli.command).into(),
        config_hash: config_hash(&config),
        config,
        seed: cfg.seed,
        versions: json!({ "nijlab": env!("CARGO_PKG_VERSION") }),
        outputs: outcome.extra_outputs,
        wall_time_s: 0.0,
        exit_code: code,
    };
    if let Some(dir) = &out_dir {
        let result_path = dir.join("result.json");
        fs::write(&result_path, &text)?;
        manifest.outputs.insert(0, result_path);
        manifest.wall_time_s = start.elapsed().as_secs_f64();
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    } else {
        manifest.wall_time_s = start.elapsed().as_secs_f64();
        let _ = writeln!(std::io::stderr(), "{}", serde_json::to_string(&manifest)?);
    }
    let _ = writeln!(std::io::stdout(), "{text}");
    Ok(code)
}

fn run_energy(cfg: &RunConfig) -> Result<Outcome> {
    let j = cfg.structure()?;
    let result = json!({ "N": energy(&j, Functional::N)?, "Ntilde": energy(&j, Functional::Ntilde)? });
    Ok(Outcome { result, passed: true, extra_outputs: vec![] })
}

const GRAD_TOL: f64 = 1e-6;

fn run_grad_check(cfg: &RunConfig, eps: f64, sweep: &[f64], directions: usize, out: Option<&Path>) -> Result<Outcome> {
    let j = cfg.structure()?;
    let var = Variation::new(&j)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = if sweep.is_empty() { vec![eps] } else { sweep.to_vec() };
    if steps.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(NijError::InvalidConfig("step sizes must be positive".into()));
    }
    let mut reports = Vec::new();
    let mut csv = String::from("direction,eps,analytic,oracle,rel_err,order\n");
    let mut passed = true;
    for (d, u) in probe_directions(&var, cfg.functional, &mut rng, directions).iter().enumerate() {
        for &e in &steps {
            let r = var.fd_directional(u, cfg.functional, e)?;
            if e == eps || sweep.is_empty() {
                passed &= r.rel_err <= GRAD_TOL;
            }
            csv.push_str(&format!("{d},{:e},{:e},{:e},{:e},{}\n", r.eps, r.analytic, r.oracle, r.rel_err, r.order_estimate));
            reports.push(r);
        }
    }
    let mut outputs = Vec::new();
    if let Some(dir) = out {
        let path = dir.join("grad_check.csv");
        fs::write(&path, &csv)?;
        outputs.push(path);
    }
    Ok(Outcome {
        result: json!({ "functional": cfg.functional, "checked_eps": eps, "tolerance": GRAD_TOL, "reports": reports }),
        passed,
        extra_outputs: outputs,
    })
}

fn run_coords(cfg: &RunConfig, jets: Option<&Path>, point: Option<usize>) -> Result<Outcome> {
    match point {
        None => {
            let jd = match jets {
                Some(path) => JetData::from_json(&serde_json::from_str(&fs::read_to_string(path)?)?)?,
                None => random_jetdata(cfg.n, &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
            };
            let cc = correction_coeffs(&jd);
            let v = verify_chart(&cc, &jd)?;
            let passed = v.is_exact();
            Ok(Outcome {
                result: json!({ "jets": jd.to_json(), "correction": cc.to_json(), "verification": v.to_json(), "exact": passed }),
                passed,
                extra_outputs: vec![],
            })
        }
        Some(p) => {
            let j = cfg.structure()?;
            let ap = adapted_point(&j, p)?;
            let c = &ap.correction;
            let pairs = |v: &[crate::scalar::C64]| v.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>();
            Ok(Outcome {
                result: json!({
                    "point": p,
                    "chart_residual": ap.chart_residual,
                    "alpha": pairs(&c.alpha), "beta": pairs(&c.beta), "gamma": pairs(&c.gamma),
                }),
                passed: ap.chart_residual <= 1e-8,
                extra_outputs: vec![],
            })
        }
    }
}

fn mat_json(m: &SqMat<crate::scalar::C64>) -> Value {
    Value::Array(
        (0..m.dim)
            .map(|r| Value::Array((0..m.dim).map(|c| json!([m.get(r, c).re, m.get(r, c).im])).collect()))
            .collect(),
    )
}

fn run_el(cfg: &RunConfig, point: usize, radii: &[f64], reading: &str) -> Result<Outcome> {
    let reading = if reading == "consistent" { ElReading::Consistent } else { ElReading::AsPrinted };
    let j = cfg.structure()?;
    let ap = adapted_point(&j, point)?;
    let t = ap.el_tensor(cfg.functional, reading);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let u0 = random_tangent(&j, &mut rng, 4, 1, 1.0);
    let sweep = el_radius_sweep(&j, point, &u0, radii, cfg.functional, reading)?;
    let in_band = !sweep.ratios.is_empty() && sweep.ratios.iter().all(|r| (1.4..=2.6).contains(r));
    Ok(Outcome {
        result: json!({
            "point": point,
            "functional": cfg.functional,
            "reading": format!("{reading:?}"),
            "components": {
                "T^q_p": mat_json(&t.tqp), "T^qbar_p": mat_json(&t.tqbp),
                "T^q_pbar": mat_json(&t.tqpb), "T^qbar_pbar": mat_json(&t.tqbpb),
            },
            "sweep": sweep,
            "first_order_ratios": in_band,
        }),
        passed: true,
        extra_outputs: vec![],
    })
}

fn run_flow_cmd(cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome> {
    let j = cfg.structure()?;
    let snap_dir = out.map(|d| d.join("snapshots"));
    let (_, trace) = run_flow(&j, &cfg.flow, snap_dir.as_deref())?;
    let mut outputs = Vec::new();
    if let Some(dir) = out {
        let path = dir.join("trace.csv");
        fs::write(&path, trace.to_csv())?;
        outputs.push(path);
    }
    outputs.extend(trace.snapshots.iter().cloned());
    let passed = trace.is_monotone() && trace.max_constraint_residual() <= 1e-11;
    Ok(Outcome {
        result: json!({
            "steps": trace.steps.len(),
            "stop": trace.stop,
            "initial_energy": trace.initial.energy,
            "final_energy": trace.steps.last().map_or(trace.initial.energy, |r| r.energy),
            "monotone": trace.is_monotone(),
            "max_constraint_residual": trace.max_constraint_residual(),
        }),
        passed,
        extra_outputs: outputs,
    })
}

pub const SUITES: [&str; 7] = ["grid", "acstruct", "nijenhuis", "variation", "coords", "el", "flow"];

fn run_verify(cfg: &RunConfig, suites: &[&str]) -> Result<Outcome> {
    let mut checks = Vec::new();
    for s in suites {
        checks.extend(verify_suite(s, cfg.seed)?);
    }
    let passed = checks.iter().all(|c| c.passed);
    let failed = checks.iter().filter(|c| !c.passed).count();
    Ok(Outcome { result: json!({ "passed": passed, "failed": failed, "checks": checks }), passed, extra_outputs: vec![] })
}

/// Runs one suite of the invariant matrix.
pub fn verify_suite(suite: &str, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    match suite {
        "grid" => {
            let g = Grid::new(2, 8)?;
            let f = Field::from_fn(g, |x| (2.0 * std::f64::consts::PI * x[1]).sin());
            let df = spectral_derivative(&f, 1)?;
            let exact = Field::from_fn(g, |x| 2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * x[1]).cos());
            let err = df.axpy(-1.0, &exact).max_abs();
            out.push(check(suite, "spectral derivative of a sine", err <= 1e-12, format!("{err:e}")));
            let b = bump(g, &g.coords(0), 0.3)?;
            out.push(check(suite, "bump peaks at its centre", (b.at(0)[0] - 1.0).abs() <= 1e-15, format!("{}", b.at(0)[0])));
        }
        "acstruct" => {
            for n in [2, 3] {
                let g = Grid::new(n, 8)?;
                let j = random_structure(g, &mut rng, 4, 1, 0.5)?;
                let r = j.constraint_residual();
                out.push(check(suite, &format!("random structure on T^{} stays on J² = −I", 2 * n), r <= 1e-11, format!("{r:e}")));
            }
        }
        "nijenhuis" => {
            let g = Grid::new(2, 8)?;
            let e = energy(&standard_structure(g), Functional::N)? + energy(&standard_structure(g), Functional::Ntilde)?;
            out.push(check(suite, "standard structure has zero energy", e <= 1e-24, format!("{e:e}")));
            let e = energy(&shear_sine(g, 0.3), Functional::N)?;
            out.push(check(suite, "shear structure has positive energy", e > 1e-3, format!("{e:e}")));
        }
        "variation" => {
            let g = Grid::new(2, 8)?;
            let j = shear_sine(g, 0.3);
            let var = Variation::new(&j)?;
            for f in [Functional::N, Functional::Ntilde] {
                let u = probe_directions(&var, f, &mut rng, 1).remove(0);
                let r = var.fd_directional(&u, f, 1e-4)?;
                out.push(check(suite, &format!("first variation of {f} against central differences"), r.rel_err <= GRAD_TOL, format!("{:e}", r.rel_err)));
                let grad = var.gradient(f);
                let lhs = grad.dot(&u);
                let rhs = var.first_variation(&u, f)?;
                let rel = (lhs - rhs).abs() / rhs.abs().max(1e-300);
                out.push(check(suite, &format!("gradient of {f} represents the first variation"), rel <= 1e-9, format!("{rel:e}")));
            }
            let j = random_trigonometric_structure(Grid::new(2, 16)?, &mut rng, 4, 1, 0.5)?;
            let t = Variation::new(&j)?.type_orthogonality(&random_tangent(&j, &mut rng, 4, 1, 1.0))?;
            let ratio = t.pairing_20.max(t.pairing_11) / (t.norm_n * t.norm_dn);
            out.push(check(suite, "mixed-type parts of dN(u) are orthogonal to N", t.passes(1e-10), format!("{ratio:e}")));
        }
        "coords" => {
            for n in [2, 3] {
                let mut exact = true;
                for _ in 0..10 {
                    let jd = random_jetdata(n, &mut rng);
                    let v = verify_chart(&correction_coeffs(&jd), &jd)?;
                    exact &= v.is_exact();
                }
                out.push(check(suite, &format!("adapted chart conditions hold exactly (n = {n})"), exact, "10 random rational jets"));
                let mut exact = true;
                for _ in 0..5 {
                    let jd = random_jetdata(n, &mut rng);
                    exact &= deri_check(&jd, &random_gamma_jet(n, &mut rng))?.is_exact();
                    let jet = random_el_jet(n, &mut rng);
                    let u = SqMat::from_fn(2 * n, |r, c| cq(((r + 2 * c) as i64 - 3, 2), (1, (r + c + 1) as i64)));
                    exact &= libp_check(&jet, &random_gamma_jet(n, &mut rng), &u)?.is_exact();
                }
                out.push(check(suite, &format!("metric-derivative and product-rule identities (n = {n})"), exact, "5 random rational jets"));
            }
        }
        "el" => {
            let mut ok = true;
            for n in [2, 3] {
                let jet = random_el_jet(n, &mut rng);
                let zero = jet.without_nijenhuis();
                for f in [Functional::N, Functional::Ntilde] {
                    ok &= el_tensor_from_jets(&zero, f, ElReading::AsPrinted).is_zero();
                }
                for reading in [ElReading::AsPrinted, ElReading::Consistent] {
                    ok &= functional_switch_residual(&jet, reading).iter().all(|m| m.data.iter().all(num_traits::Zero::is_zero));
                }
            }
            out.push(check(suite, "tensor vanishes without N; functional switch is exact", ok, "random rational jets, n = 2, 3"));
            let g = Grid::new(2, 16)?;
            let j = shear_sine(g, 0.3);
            let var = Variation::new(&j)?;
            let p = 4096 + 3;
            let ap = adapted_point(&j, p)?;
            let u = random_tangent(&j, &mut rng, 4, 1, 1.0).localized(&bump(g, &g.coords(p), 0.05)?);
            let c = compare(&var, &ap, &ap.el_tensor(Functional::Ntilde, ElReading::AsPrinted), &u, 0.05)?;
            out.push(check(suite, "point-supported pairing matches the first variation", c.rel_gap <= 1e-10, format!("{:e}", c.rel_gap)));
        }
        "flow" => {
            let g = Grid::new(2, 8)?;
            let cfg = FlowConfig { max_steps: 5, ..Default::default() };
            let (_, trace) = run_flow(&shear_sine(g, 0.3), &cfg, None)?;
            out.push(check(suite, "energy is nonincreasing", trace.is_monotone(), format!("{} steps", trace.steps.len())));
            let r = trace.max_constraint_residual();
            out.push(check(suite, "flow stays on J² = −I", r <= 1e-11, format!("{r:e}")));
        }
        other => return Err(NijError::InvalidConfig(format!("unknown suite {other:?}"))),
    }
    Ok(out)
}
