use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::metrics::{attack_r2, mean, quantile, variance, RSquared};
use super::{AnalysisError, Result};
use crate::config::Scenario;
use crate::protocol::{PartyLog, RoundTranscript};
use crate::ring::{decode, FixedPointParams};
use crate::PartyId;

/// Spread of `estimate - actual`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSummary {
    pub mean: f64,
    pub std: f64,
    /// 5%, 25%, 50%, 75% and 95% quantiles.
    pub quantiles: [f64; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub scenario: Scenario,
    pub estimates: Vec<f64>,
    pub actuals: Vec<f64>,
    pub r_squared: RSquared,
    pub error: ErrorSummary,
}

impl AttackResult {
    pub fn residuals(&self) -> Vec<f64> {
        self.estimates.iter().zip(&self.actuals).map(|(e, a)| e - a).collect()
    }

    pub fn residual_variance(&self) -> f64 {
        variance(&self.residuals())
    }
}

/// The colluders' pooled view of one aggregation instance and the honest
/// party's true weight.
struct View<'a> {
    actual: f64,
    output: f64,
    colluders: Vec<&'a PartyLog>,
}

fn view<'a>(t: &'a RoundTranscript, weight: u32, honest: PartyId, n: usize) -> Result<View<'a>> {
    let missing = |what: String| AnalysisError::MissingLogs { round: t.round, what };
    let own = t.party(weight, honest).ok_or_else(|| missing(format!("honest party {honest}")))?;
    let w = *t.global.get(weight as usize).ok_or_else(|| missing(format!("global weight {weight}")))?;
    let colluders: Vec<&PartyLog> = (0..n as PartyId)
        .filter(|&i| i != honest)
        .map(|i| t.party(weight, i).ok_or_else(|| missing(format!("party {i}"))))
        .collect::<Result<_>>()?;
    Ok(View {
        actual: own.weight_value,
        output: w * n as f64,
        colluders,
    })
}

/// Scenario-specific noise the colluders remove on top of their weights.
fn correction(
    scenario: Scenario,
    colluders: &[&PartyLog],
    fp: &FixedPointParams,
    rng: &mut ChaCha20Rng,
    round: u32,
) -> Result<f64> {
    let mismatch = || AnalysisError::ModeMismatch {
        scenario,
        round,
    };
    let oblivious = colluders.iter().all(|c| !c.draws.is_empty() && !c.received.is_empty());
    let shares = colluders.iter().all(|c| c.local_share.is_some());
    match scenario {
        Scenario::NonOblivious => {
            if !shares {
                return Err(mismatch());
            }
            Ok(colluders.iter().filter_map(|c| c.local_share).sum())
        }
        _ if !oblivious => Err(mismatch()),
        Scenario::Naive => Ok(0.0),
        Scenario::Random => Ok(colluders
            .iter()
            .flat_map(|c| &c.draws)
            .map(|d| if rng.random::<bool>() { d.diff1() } else { d.diff0() })
            .sum()),
        Scenario::Mean => Ok(colluders
            .iter()
            .flat_map(|c| &c.draws)
            .map(|d| 0.5 * (d.diff0() + d.diff1()))
            .sum()),
        Scenario::Diff => {
            let mut total = 0.0;
            for c in colluders {
                for (chosen, other) in c.chosen() {
                    total += 0.5 * decode(chosen - other, fp)?;
                }
            }
            Ok(total)
        }
    }
}

/// Streams transcripts one round at a time and keeps one estimate per
/// round and scenario.
#[derive(Debug)]
pub struct AttackAccumulator {
    weight: u32,
    honest: PartyId,
    n: usize,
    fixed_point: FixedPointParams,
    scenarios: Vec<Scenario>,
    rng: ChaCha20Rng,
    rounds: Vec<u32>,
    actuals: Vec<f64>,
    estimates: Vec<Vec<f64>>,
}

impl AttackAccumulator {
    pub fn new(
        scenarios: &[Scenario],
        weight: u32,
        honest: PartyId,
        n: usize,
        fixed_point: FixedPointParams,
        guess_seed: u64,
    ) -> Self {
        AttackAccumulator {
            weight,
            honest,
            n,
            fixed_point,
            scenarios: scenarios.to_vec(),
            rng: ChaCha20Rng::seed_from_u64(guess_seed),
            rounds: Vec::new(),
            actuals: Vec::new(),
            estimates: vec![Vec::new(); scenarios.len()],
        }
    }

    pub fn observe(&mut self, t: &RoundTranscript) -> Result<()> {
        let v = view(t, self.weight, self.honest, self.n)?;
        let known: f64 = v.colluders.iter().map(|c| c.weight_value).sum();
        let mut row = Vec::with_capacity(self.scenarios.len());
        for &s in &self.scenarios {
            row.push(v.output - known - correction(s, &v.colluders, &self.fixed_point, &mut self.rng, t.round)?);
        }
        for (col, e) in self.estimates.iter_mut().zip(row) {
            col.push(e);
        }
        self.actuals.push(v.actual);
        self.rounds.push(t.round);
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.actuals.len()
    }

    pub fn rounds(&self) -> &[u32] {
        &self.rounds
    }

    pub fn finish(self) -> Result<Vec<AttackResult>> {
        let actuals = self.actuals;
        self.scenarios
            .into_iter()
            .zip(self.estimates)
            .map(|(scenario, estimates)| {
                let r_squared = attack_r2(&estimates, &actuals)?;
                let mut res: Vec<f64> = estimates.iter().zip(&actuals).map(|(e, a)| e - a).collect();
                res.sort_by(f64::total_cmp);
                let error = if res.is_empty() {
                    ErrorSummary {
                        mean: f64::NAN,
                        std: f64::NAN,
                        quantiles: [f64::NAN; 5],
                    }
                } else {
                    ErrorSummary {
                        mean: mean(&res),
                        std: if res.len() > 1 { variance(&res).sqrt() } else { f64::NAN },
                        quantiles: [0.05, 0.25, 0.5, 0.75, 0.95].map(|q| quantile(&res, q)),
                    }
                };
                Ok(AttackResult {
                    scenario,
                    estimates,
                    actuals: actuals.clone(),
                    r_squared,
                    error,
                })
            })
            .collect()
    }
}

/// The n-1 collusion attack against `honest` over captured transcripts,
/// one estimate per transcript.
pub fn collusion_attack(
    transcripts: &[RoundTranscript],
    weight: u32,
    honest: PartyId,
    n: usize,
    scenario: Scenario,
    fixed_point: FixedPointParams,
    guess_seed: u64,
) -> Result<AttackResult> {
    let mut acc = AttackAccumulator::new(&[scenario], weight, honest, n, fixed_point, guess_seed);
    for t in transcripts {
        acc.observe(t)?;
    }
    Ok(acc.finish()?.remove(0))
}

/// `config_hash,iteration,scenario,actual,estimate`, iteration being the round.
pub fn write_attack_csv<W: Write>(
    results: &[AttackResult],
    rounds: &[u32],
    out: W,
    config_hash: &str,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config_hash", "iteration", "scenario", "actual", "estimate"])?;
    for r in results {
        for ((round, a), e) in rounds.iter().zip(&r.actuals).zip(&r.estimates) {
            w.write_record([
                config_hash.to_string(),
                round.to_string(),
                r.scenario.name().to_string(),
                a.to_string(),
                e.to_string(),
            ])?;
        }
    }
    w.flush()
}
