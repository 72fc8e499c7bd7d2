//! `cost`, `match`, `train`, `eval` and `gradcheck`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use switchhead_core::attention::{ExpertFlags, Position, Variant};
use switchhead_core::costmodel::{cost_moa, cost_switchhead, cost_xl, human, CostInputs, CostReport};
use switchhead_core::model::suite::{gradient_suite, SUITE_TOL};
use switchhead_core::model::{build, count_params, match_params, Model, ModelSpec};
use switchhead_core::numerics::Term;
use switchhead_core::tasks::listops::ListOpsExample;
use switchhead_core::tasks::{self, gen_listops, CharCorpus, Evaluation, ListOpsParams, MetricRow, Split, Task, TrainConfig};
use switchhead_core::Error;

use crate::checkpoint::{self, Tokenizer};
use crate::config::{ensure_out, RawConfig};
use crate::{CliError, CliResult, Common};

fn one() -> usize {
    1
}

/// One attention layer to cost.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostRow {
    pub name: String,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub position: Position,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_model: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C", default = "one")]
    pub context_mult: usize,
    #[serde(rename = "E", default = "one")]
    pub n_experts: usize,
    #[serde(rename = "K", default = "one")]
    pub k_active: usize,
    /// Expert projections of SwitchHead; value and output by default.
    pub experts: Option<ExpertFlags>,
    /// SwitchHead only: project the position encodings once per layer.
    pub shared_pos: Option<bool>,
    /// Multipliers applied to the per-layer, per-sequence counts.
    #[serde(default = "one")]
    pub layers: usize,
    #[serde(default = "one")]
    pub batch: usize,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default)]
    pub row: Vec<CostRow>,
}

pub fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Dense => "dense",
        Variant::HeadGated => "head_gated",
        Variant::SwitchHead => "switchhead",
        Variant::Moa => "moa",
    }
}

impl CostRow {
    fn inputs(&self) -> CostInputs {
        let experts = match self.variant {
            Variant::SwitchHead => self.experts.unwrap_or_default(),
            _ => ExpertFlags::NONE,
        };
        CostInputs {
            variant: self.variant,
            position: self.position,
            n_heads: self.n_heads,
            t: self.t,
            d_head: self.d_head,
            d_model: self.d_model,
            context_mult: self.context_mult,
            k_active: self.k_active,
            n_experts: self.n_experts,
            experts,
        }
    }

    /// Number of attention matrices.
    pub fn heads(&self) -> usize {
        if self.variant == Variant::Moa {
            self.k_active
        } else {
            self.n_heads
        }
    }

    /// Closed-form cost scaled by `layers * batch`.
    pub fn report(&self) -> switchhead_core::Result<CostReport> {
        let mut problems = Vec::new();
        if self.shared_pos.is_some() && self.variant != Variant::SwitchHead {
            problems.push("shared_pos applies to switchhead rows only".to_string());
        }
        if self.experts.is_some() && self.variant != Variant::SwitchHead {
            problems.push("experts applies to switchhead rows only".to_string());
        }
        if self.k_active > self.n_experts {
            problems.push(format!("K = {} exceeds E = {}", self.k_active, self.n_experts));
        }
        if self.layers == 0 || self.batch == 0 {
            problems.push("layers and batch must be positive".to_string());
        }
        let i = self.inputs();
        if let Err(e) = i.validate() {
            problems.push(e.to_string());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.into_iter().map(|p| format!("row `{}`: {p}", self.name)).collect()));
        }
        let mut r = match self.variant {
            Variant::Dense | Variant::HeadGated => cost_xl(&i),
            Variant::SwitchHead => cost_switchhead(&i, self.shared_pos.unwrap_or(true)),
            Variant::Moa => cost_moa(&i),
        };
        let m = (self.layers * self.batch) as u64;
        if m != 1 {
            r.macs *= m;
            r.mem_floats *= m;
            for c in r.terms.values_mut().chain(r.extras.values_mut()) {
                c.macs *= m;
                c.mem_floats *= m;
            }
        }
        Ok(r)
    }
}

/// Terms reported column by column in the machine-readable table.
const TSV_TERMS: [Term; 8] = [
    Term::Projection,
    Term::Scores,
    Term::Readout,
    Term::Position,
    Term::ExpertMixing,
    Term::Selection,
    Term::PositionScores,
    Term::Rotary,
];

/// Plain-text table and its tab-separated twin with exact integers.
pub fn cost_tables(cfg: &CostConfig) -> switchhead_core::Result<(String, String)> {
    let mut text = format!("{:<32} {:<11} {:>5} {:>9} {:>12} {:>15} {:>13}\n", "name", "variant", "heads", "MACs", "Mem (floats)", "macs", "mem_floats");
    let mut tsv = String::from("name\tvariant\theads\tT\tmacs\tmem_floats");
    for t in TSV_TERMS {
        write!(tsv, "\t{t}_macs\t{t}_mem").unwrap();
    }
    tsv.push('\n');
    for row in &cfg.row {
        let r = row.report()?;
        let v = variant_name(row.variant);
        writeln!(text, "{:<32} {:<11} {:>5} {:>9} {:>12} {:>15} {:>13}", row.name, v, row.heads(), human(r.macs), human(r.mem_floats), r.macs, r.mem_floats)
            .unwrap();
        write!(tsv, "{}\t{}\t{}\t{}\t{}\t{}", row.name, v, row.heads(), row.t, r.macs, r.mem_floats).unwrap();
        for t in TSV_TERMS {
            let c = r.term(t);
            write!(tsv, "\t{}\t{}", c.macs, c.mem_floats).unwrap();
        }
        tsv.push('\n');
    }
    Ok((text, tsv))
}

pub fn cost(common: &Common) -> CliResult<()> {
    let cfg: CostConfig = RawConfig::load(common)?.decode()?;
    let (text, tsv) = cost_tables(&cfg)?;
    print!("{text}");
    ensure_out(common)?;
    std::fs::write(common.out.join("cost.txt"), &text)?;
    std::fs::write(common.out.join("cost.tsv"), &tsv)?;
    Ok(())
}

/// Fills the attention width from the model and validates.
pub fn finish_spec(mut spec: ModelSpec) -> switchhead_core::Result<ModelSpec> {
    if spec.attention.d_model == 0 {
        spec.attention.d_model = spec.d_model;
    }
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub d_head: usize,
    pub d_ff: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    /// Parameter budget; alternatively given by `[baseline]`.
    pub target: Option<usize>,
    pub baseline: Option<ModelSpec>,
    pub template: ModelSpec,
    /// Published sizes to compare the result against.
    pub reference: Option<Reference>,
}

pub fn match_report(cfg: MatchConfig) -> CliResult<(String, switchhead_core::model::MatchResult)> {
    let template = finish_spec(cfg.template)?;
    let target = match (cfg.target, cfg.baseline) {
        (Some(t), None) => t,
        (None, Some(b)) => count_params(&finish_spec(b)?),
        _ => return Err(Error::config("give exactly one of `target` and `[baseline]`").into()),
    };
    let m = match_params(target, &template)?;
    let mut s = String::new();
    writeln!(s, "target          {}", m.target).unwrap();
    writeln!(s, "template        {} parameters", count_params(&template)).unwrap();
    writeln!(s, "d_head          {}", m.spec.attention.d_head).unwrap();
    writeln!(s, "d_ff            {}", m.spec.mlp.d_ff()).unwrap();
    writeln!(s, "parameters      {}", m.param_count).unwrap();
    writeln!(s, "slack           {}", m.slack).unwrap();
    if m.coarse_step {
        writeln!(s, "note            one expert-width step overshoots the target; slack is above the band").unwrap();
    }
    if let Some(r) = cfg.reference {
        writeln!(
            s,
            "reference       d_head {} d_ff {} -> found d_head {:+} d_ff {:+}",
            r.d_head,
            r.d_ff,
            m.spec.attention.d_head as i64 - r.d_head as i64,
            m.spec.mlp.d_ff() as i64 - r.d_ff as i64
        )
        .unwrap();
    }
    writeln!(s, "trace").unwrap();
    for step in &m.trace {
        writeln!(s, "  d_head {:>4}  d_ff {:>6}  params {:>12}  {}", step.d_head, step.d_ff, step.params, if step.accepted { "accept" } else { "reject" })
            .unwrap();
    }
    Ok((s, m))
}

pub fn matching(common: &Common) -> CliResult<()> {
    let cfg: MatchConfig = RawConfig::load(common)?.decode()?;
    let (report, m) = match_report(cfg)?;
    print!("{report}");
    ensure_out(common)?;
    std::fs::write(common.out.join("match.txt"), &report)?;
    std::fs::write(common.out.join("match.toml"), m.spec.to_toml())?;
    Ok(())
}

fn default_n_train() -> usize {
    10_000
}

fn default_n_valid() -> usize {
    1_000
}

fn default_valid_fraction() -> f64 {
    0.05
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated ListOps, or `label<TAB>tokens` files when both are given.
    #[serde(rename = "listops")]
    ListOps {
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_valid")]
        n_valid: usize,
        #[serde(default)]
        generator: ListOpsParams,
        train_file: Option<PathBuf>,
        valid_file: Option<PathBuf>,
    },
    /// Byte-level text; the tail is held out for validation.
    Chars {
        path: PathBuf,
        #[serde(default = "default_valid_fraction")]
        valid_fraction: f64,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn read_listops(path: &Path) -> CliResult<Vec<ListOpsExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read dataset {}: {e}", path.display())))?;
    let out = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| ListOpsExample::from_line(l).map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect::<switchhead_core::Result<Vec<_>>>()?;
    Ok(out)
}

/// Loads or generates the dataset. Generated ListOps draws the training and
/// validation sets from one stream so they never share a draw.
pub fn load_task(data: &DataConfig, seed: u64) -> CliResult<(Task, Tokenizer)> {
    match data {
        DataConfig::ListOps { n_train, n_valid, generator, train_file, valid_file } => {
            let (train, valid) = match (train_file, valid_file) {
                (Some(t), Some(v)) => (read_listops(t)?, read_listops(v)?),
                (None, None) => {
                    generator.validate().map_err(|e| Error::config(format!("data.generator: {e}")))?;
                    let mut all = gen_listops(n_train + n_valid, generator, seed)?;
                    let valid = all.split_off(*n_train);
                    (all, valid)
                }
                _ => return Err(CliError::Usage("give both data.train_file and data.valid_file, or neither".into())),
            };
            Ok((Task::ListOps { train, valid }, Tokenizer::ListOps))
        }
        DataConfig::Chars { path, valid_fraction } => {
            if !path.is_file() {
                return Err(CliError::Usage(format!("dataset {} does not exist", path.display())));
            }
            let corpus = CharCorpus::from_file(path, *valid_fraction)?;
            let tok = Tokenizer::for_corpus(&corpus);
            Ok((Task::Chars(corpus), tok))
        }
    }
}

/// Final training row and validation metrics of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub steps: usize,
    pub parameters: usize,
    pub final_train: Option<MetricRow>,
    pub valid: Evaluation,
}

pub fn train(common: &Common) -> CliResult<Summary> {
    let raw = RawConfig::load(common)?;
    let cfg: RunConfig = raw.decode()?;
    let spec = finish_spec(cfg.model.ok_or_else(|| Error::config("missing [model] section"))?)?;
    let (task, tokenizer) = load_task(&cfg.data, common.seed)?;
    let mut model = build(&spec, common.seed)?;
    ensure_out(common)?;
    std::fs::write(common.out.join("config.toml"), toml::to_string(&raw.table()?).expect("table serializes"))?;
    let mut rows = Vec::new();
    let result = tasks::train_with(&mut model, &task, &cfg.train, common.seed, |r| {
        println!(
            "step {:>6}  loss {:.4}{}  grad_norm {:.3}  lr {:.2e}",
            r.step,
            r.loss,
            r.accuracy.map(|a| format!("  acc {a:.4}")).or(r.bpc.map(|b| format!("  bpc {b:.4}"))).unwrap_or_default(),
            r.grad_norm,
            r.lr
        );
        rows.push(r.clone());
    });
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(common.out.join("metrics.tsv"))?);
    tasks::write_metrics(&rows, &mut metrics)?;
    metrics.flush()?;
    result?;
    checkpoint::save(&common.out.join("checkpoint.bin"), &model, &tokenizer)?;
    let summary = Summary {
        seed: common.seed,
        steps: cfg.train.steps,
        parameters: model.params().numel(),
        final_train: rows.last().cloned(),
        valid: tasks::evaluate(&model, &task, Split::Valid)?,
    };
    write_summary(&common.out.join("summary.toml"), &summary)?;
    print_eval(&summary.valid);
    Ok(summary)
}

fn write_summary(path: &Path, value: &impl Serialize) -> CliResult<()> {
    std::fs::write(path, toml::to_string(value).expect("summary serializes"))?;
    Ok(())
}

fn print_eval(e: &Evaluation) {
    let mut s = format!("valid  loss {:.6}  n {}", e.loss, e.count);
    if let Some(a) = e.accuracy {
        write!(s, "  accuracy {a:.4}").unwrap();
    }
    if let (Some(p), Some(b)) = (e.perplexity, e.bpc) {
        write!(s, "  perplexity {p:.4}  bpc {b:.4}").unwrap();
    }
    println!("{s}");
}

/// Validation metrics of `model` on the configured data.
pub fn evaluate_on(model: &Model, tokenizer: &Tokenizer, data: &DataConfig, seed: u64) -> CliResult<Evaluation> {
    let (task, data_tok) = load_task(data, seed)?;
    if let (Tokenizer::Bytes(a), Tokenizer::Bytes(b)) = (tokenizer, &data_tok) {
        if a != b {
            return Err(Error::Contract("the corpus vocabulary differs from the one the checkpoint was trained on".into()).into());
        }
    }
    Ok(tasks::evaluate(model, &task, Split::Valid)?)
}

/// Evaluates a checkpoint; the `[model]` section, if any, must match it.
pub fn eval(common: &Common, checkpoint_path: &Path) -> CliResult<Evaluation> {
    let cfg: RunConfig = RawConfig::load(common)?.decode()?;
    let (model, tokenizer) = checkpoint::load(checkpoint_path)?;
    if let Some(spec) = cfg.model {
        if finish_spec(spec)? != *model.spec() {
            return Err(Error::config("the [model] section differs from the checkpoint's spec").into());
        }
    }
    let e = evaluate_on(&model, &tokenizer, &cfg.data, common.seed)?;
    print_eval(&e);
    ensure_out(common)?;
    write_summary(&common.out.join("eval.toml"), &e)?;
    Ok(e)
}

pub fn gradcheck(common: &Common, n_seeds: u64) -> CliResult<()> {
    let seeds: Vec<u64> = (common.seed..common.seed + n_seeds.max(1)).collect();
    let cases = gradient_suite(&seeds)?;
    let mut tsv = String::from("case\tseed\tmax_rel_err\tchecked\tpass\n");
    let mut failed = 0;
    for c in &cases {
        let ok = c.passes();
        failed += usize::from(!ok);
        println!("{:<18} seed {:<3} max rel err {:.3e}  entries {:>4}  {}", c.name, c.seed, c.report.max_rel_err, c.report.checked, if ok { "ok" } else { "FAIL" });
        writeln!(tsv, "{}\t{}\t{:e}\t{}\t{}", c.name, c.seed, c.report.max_rel_err, c.report.checked, ok).unwrap();
    }
    ensure_out(common)?;
    std::fs::write(common.out.join("gradcheck.tsv"), tsv)?;
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} of {} cases exceed relative error {SUITE_TOL:e}", cases.len())).into());
    }
    println!("all {} cases within {SUITE_TOL:e}", cases.len());
    Ok(())
}
