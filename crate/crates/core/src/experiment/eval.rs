//! Test-split evaluation of a trained policy against reference rankers.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::env::EnvContext;
use super::train::stream_seed;
use crate::error::{Error, Result};
use crate::needs::format_f64_17;
use crate::policy::{greedy_ranking, PolicyParams};
use crate::ranking::{metrics, MetricReport, Ranking};
use crate::stats::{mean, standard_error};

const RANDOM_STREAM: u64 = 3;

/// Ranks candidates by descending evaluation relevance; ties keep candidate order.
pub fn oracle_ranking(e: &EnvContext) -> Result<Ranking> {
    let gains = e.eval_relevance.gains_for(&e.ctx.candidates)?;
    let mut order: Vec<usize> = (0..gains.len()).collect();
    order.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]).then(a.cmp(&b)));
    Ranking::new(order.into_iter().map(|i| e.ctx.candidates[i]).collect(), e.ctx.id)
}

pub fn random_ranking(e: &EnvContext, seed: u64) -> Result<Ranking> {
    let mut items = e.ctx.candidates.clone();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, RANDOM_STREAM, e.ctx.id)));
    Ranking::new(items, e.ctx.id)
}

/// One aggregate line of `eval.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub ranker: &'static str,
    pub metric: &'static str,
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    /// The policy's per-context reports.
    pub per_context: Vec<MetricReport>,
}

pub const METRICS: [&str; 6] = ["ndcg5", "ndcg10", "ndcg30", "recall5", "mrr5", "precision5"];

fn metric_value(r: &MetricReport, name: &str) -> f64 {
    match name {
        "ndcg5" => r.ndcg5,
        "ndcg10" => r.ndcg10,
        "ndcg30" => r.ndcg30,
        "recall5" => r.recall5,
        "mrr5" => r.mrr5,
        "precision5" => r.precision5,
        _ => unreachable!("unknown metric {name}"),
    }
}

impl EvalSummary {
    pub const CSV_HEADER: &'static str = "ranker,metric,mean,std_error,n";

    pub fn get(&self, ranker: &str, metric: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.ranker == ranker && r.metric == metric)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.ranker, r.metric, format_f64_17(r.mean), format_f64_17(r.std_error), r.n)?;
        }
        Ok(())
    }
}

fn aggregate(ranker: &'static str, reports: &[MetricReport], out: &mut Vec<EvalRow>) {
    for metric in METRICS {
        let xs: Vec<f64> = reports.iter().map(|r| metric_value(r, metric)).collect();
        out.push(EvalRow {
            ranker,
            metric,
            mean: mean(&xs),
            std_error: standard_error(&xs),
            n: xs.len(),
        });
    }
}

/// Greedy policy, oracle and seeded random rankers on `contexts`, with
/// mean and standard error per metric.
pub fn run_eval(params: &PolicyParams, contexts: &[EnvContext], seed: u64) -> Result<EvalSummary> {
    if contexts.is_empty() {
        return Err(Error::Empty("evaluation contexts"));
    }
    let score = |f: &(dyn Fn(&EnvContext) -> Result<Ranking> + Sync)| -> Result<Vec<MetricReport>> {
        contexts.par_iter().map(|e| metrics(&f(e)?, &e.eval_relevance)).collect()
    };
    let policy = score(&|e| Ok(greedy_ranking(params, &e.features)))?;
    let oracle = score(&oracle_ranking)?;
    let random = score(&|e| random_ranking(e, seed))?;
    let mut rows = Vec::new();
    aggregate("policy", &policy, &mut rows);
    aggregate("oracle", &oracle, &mut rows);
    aggregate("random", &random, &mut rows);
    Ok(EvalSummary { rows, per_context: policy })
}
