use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swaprank::data::generate_synthetic;
use swaprank::experiment::ablation::{run_ablation, AblationPreset, AblationRow};
use swaprank::experiment::train::{train_env_critic, RewardModel, TrainLogRow};
use swaprank::experiment::{run_eval, DataSource, Environment, ExperimentConfig};
use swaprank::needs::format_f64_17;
use swaprank::policy::PolicyParams;
use swaprank::ranking::MetricReport;
use swaprank::Error;

#[derive(Parser)]
#[command(name = "swaprank", version, about = "Need-conditioned ranking with swap-based item rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed (and the synthetic and critic seeds).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic interaction log, embeddings and topics.
    GenSynthetic(Common),
    /// Write the per-candidate relevance of every context under the configured need.
    MakeNeeds(Common),
    /// Train the heteroscedastic critic and report its calibration.
    TrainCritic(Common),
    /// Train the ranking policy.
    Train(Common),
    /// Evaluate a policy checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/policy.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run an ablation preset over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// reward_variant, uncertainty or granularity.
        #[arg(long, default_value = "reward_variant")]
        preset: String,
    },
}

fn load_config(c: &Common) -> swaprank::Result<ExperimentConfig> {
    let cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    std::fs::create_dir_all(&c.out)?;
    Ok(cfg)
}

fn create(path: &Path) -> swaprank::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn finish(mut w: BufWriter<File>) -> swaprank::Result<()> {
    w.flush()?;
    Ok(())
}

fn gen_synthetic(c: &Common) -> swaprank::Result<()> {
    let cfg = load_config(c)?;
    let DataSource::Synthetic(s) = &cfg.data else {
        return Err(Error::Config("gen-synthetic needs data.source = \"synthetic\"".into()));
    };
    let d = generate_synthetic(s)?;
    d.log.save(&c.out.join("interactions.csv"))?;
    d.embeddings.save(&c.out.join("embeddings.tsv"))?;
    d.topics.save(&c.out.join("topics.tsv"))?;
    println!("wrote {} interactions for {} items to {}", d.log.len(), d.embeddings.len(), c.out.display());
    Ok(())
}

fn make_needs(c: &Common) -> swaprank::Result<()> {
    let cfg = load_config(c)?;
    let env = Environment::build(&cfg)?;
    let mut w = create(&c.out.join("relevance.tsv"))?;
    writeln!(w, "split\tcontext_id\titem_id\tgain")?;
    for (split, contexts) in [("train", &env.train), ("val", &env.val), ("test", &env.test)] {
        for e in contexts.iter() {
            for &item in &e.ctx.candidates {
                writeln!(w, "{split}\t{}\t{item}\t{}", e.ctx.id, format_f64_17(e.eval_relevance.gain(item)?))?;
            }
        }
    }
    finish(w)?;
    println!("wrote relevance for need {} to {}", cfg.need.name(), c.out.join("relevance.tsv").display());
    Ok(())
}

fn train_critic_cmd(c: &Common) -> swaprank::Result<()> {
    let cfg = load_config(c)?;
    let env = Environment::build(&cfg)?;
    let trained = train_env_critic(&env, &cfg)?;
    let mut w = create(&c.out.join("critic.ckpt"))?;
    trained.params.save(&mut w)?;
    finish(w)?;
    let w = create(&c.out.join("calibration.csv"))?;
    trained.validation.write_csv(w)?;
    let mut w = create(&c.out.join("critic_curve.csv"))?;
    writeln!(w, "epoch,train_loss,val_mse")?;
    for (i, (l, m)) in trained.history.iter().enumerate() {
        writeln!(w, "{},{},{}", i + 1, format_f64_17(*l), format_f64_17(*m))?;
    }
    finish(w)?;
    let v = &trained.validation;
    println!(
        "critic: mse {:.4} pearson_mean {:.3} (p {:.2e}) pearson_var {:.3} (p {:.2e}) best epoch {}",
        v.mse, v.pearson_mean, v.pearson_mean_p, v.pearson_var, v.pearson_var_p, v.epoch_best
    );
    Ok(())
}

fn train(c: &Common) -> swaprank::Result<()> {
    let cfg = load_config(c)?;
    let env = Environment::build(&cfg)?;
    let model = RewardModel::from_config(&env, &cfg)?;
    let rewards = swaprank::experiment::train::precompute_rewards(&env, &model, &cfg)?;
    let run = swaprank::experiment::train::train_policy(&env, &rewards, &cfg, Some(&c.out.join("policy_last_good.ckpt")))?;
    TrainLogRow::write_csv(&run.log, create(&c.out.join("train_log.csv"))?)?;
    let mut w = create(&c.out.join("policy.ckpt"))?;
    run.params.save(&mut w)?;
    finish(w)?;
    let (v5, v10) = run.final_validation();
    println!("trained {} steps: val ndcg@5 {v5:.4} ndcg@10 {v10:.4}", cfg.trainer.steps);
    Ok(())
}

fn eval(c: &Common, checkpoint: Option<&Path>) -> swaprank::Result<()> {
    let cfg = load_config(c)?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| c.out.join("policy.ckpt"));
    let params = PolicyParams::load(BufReader::new(File::open(&path)?))?;
    let env = Environment::build(&cfg)?;
    if params.dim != env.feature_dim() {
        return Err(Error::Dimension(format!("checkpoint dim {} but features have {}", params.dim, env.feature_dim())));
    }
    let summary = run_eval(&params, &env.test, cfg.seed)?;
    summary.write_csv(create(&c.out.join("eval.csv"))?)?;
    MetricReport::write_csv(&summary.per_context, create(&c.out.join("eval_contexts.csv"))?)?;
    for ranker in ["policy", "oracle", "random"] {
        let r = summary.get(ranker, "ndcg5").expect("ndcg5 row");
        println!("{ranker}: ndcg@5 {:.4} ± {:.4} (n={})", r.mean, r.std_error, r.n);
    }
    Ok(())
}

fn ablate(c: &Common, preset: &str) -> swaprank::Result<()> {
    let preset = AblationPreset::parse(preset)?;
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.ablation.seeds = vec![s];
    }
    let rows = run_ablation(&cfg, preset)?;
    AblationRow::write_csv(&rows, create(&c.out.join("ablation.csv"))?)?;
    for r in &rows {
        println!("{} seed {}: val ndcg@5 {:.4} test ndcg@5 {:.4}", r.row, r.seed, r.val_ndcg5, r.test_ndcg5);
    }
    Ok(())
}

fn run(cli: Cli) -> swaprank::Result<()> {
    match &cli.command {
        Command::GenSynthetic(c) => gen_synthetic(c),
        Command::MakeNeeds(c) => make_needs(c),
        Command::TrainCritic(c) => train_critic_cmd(c),
        Command::Train(c) => train(c),
        Command::Eval { common, checkpoint } => eval(common, checkpoint.as_deref()),
        Command::Ablate { common, preset } => ablate(common, preset),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
