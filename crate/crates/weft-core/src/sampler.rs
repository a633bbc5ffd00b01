//! Upsampling budgets and the three-phase curriculum schedule: uniform
//! language exposure in the initial and final phases, natural
//! (post-upsampling) distribution in between. The shard manifest realizes a
//! schedule as a deterministic, seeded sampling plan over concrete
//! documents.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-language upsampling decision. Token counts are fractional so paper
/// scale (billions) and desk scale (raw counts) share the arithmetic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageBudget {
    pub lang: String,
    pub unique_tokens: f64,
    pub total_tokens: f64,
    /// total / unique; 1.0 means no upsampling.
    pub ratio: f64,
    /// Whether an explicit ratio override was applied.
    pub overridden: bool,
}

/// Computes per-language totals: `min(round(cap x unique), target)`, never
/// below unique; languages at or above the target keep their unique count.
/// Explicit ratio overrides bypass the rule. `round_step` of 0 disables
/// rounding; a positive step rounds `cap x unique` to its nearest multiple.
pub fn compute_budgets(
    uniques: &BTreeMap<String, f64>,
    cap: f64,
    target: f64,
    overrides: &BTreeMap<String, f64>,
    round_step: f64,
) -> Result<Vec<LanguageBudget>> {
    if uniques.is_empty() {
        return Err(Error::Validation("no languages in budget input".into()));
    }
    if cap <= 1.0 {
        return Err(Error::Config("upsampling cap must be > 1".into()));
    }
    if target <= 0.0 {
        return Err(Error::Config("target must be > 0".into()));
    }
    let round = |x: f64| {
        if round_step > 0.0 {
            (x / round_step).round() * round_step
        } else {
            x
        }
    };
    let mut out = Vec::with_capacity(uniques.len());
    for (lang, &unique) in uniques {
        if unique < 0.0 {
            return Err(Error::Validation(format!(
                "negative unique token count for {lang}"
            )));
        }
        let (total, overridden) = if let Some(&ratio) = overrides.get(lang) {
            (round(ratio * unique), true)
        } else if unique >= target {
            (unique, false)
        } else {
            (round(cap * unique).min(target).max(unique), false)
        };
        let ratio = if unique > 0.0 { total / unique } else { 1.0 };
        out.push(LanguageBudget {
            lang: lang.clone(),
            unique_tokens: unique,
            total_tokens: total,
            ratio,
            overridden,
        });
    }
    Ok(out)
}

/// A budget row that disagrees with a reference total: reported, never
/// silently adjusted.
#[derive(Debug, Clone, Serialize)]
pub struct BudgetMismatch {
    pub lang: String,
    pub computed_total: f64,
    pub reference_total: f64,
}

/// Compares computed totals against reference values within a tolerance.
pub fn compare_totals(
    budgets: &[LanguageBudget],
    reference: &BTreeMap<String, f64>,
    tolerance: f64,
) -> Vec<BudgetMismatch> {
    let mut mismatches = Vec::new();
    for budget in budgets {
        if let Some(&expected) = reference.get(&budget.lang) {
            if (budget.total_tokens - expected).abs() > tolerance {
                mismatches.push(BudgetMismatch {
                    lang: budget.lang.clone(),
                    computed_total: budget.total_tokens,
                    reference_total: expected,
                });
            }
        }
    }
    mismatches
}

/// Reads the budgets CSV: `lang,unique_tokens[,ratio_override]`, `#`
/// comments allowed.
pub fn read_budget_csv(path: &Path) -> Result<(BTreeMap<String, f64>, BTreeMap<String, f64>)> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut uniques = BTreeMap::new();
    let mut overrides = BTreeMap::new();
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Record {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(|f| f.trim()).collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(bad(format!("expected 2-3 fields, got {}", fields.len())));
        }
        let lang = fields[0].to_lowercase();
        let unique: f64 = fields[1]
            .parse()
            .map_err(|_| bad(format!("bad count: {}", fields[1])))?;
        uniques.insert(lang.clone(), unique);
        if fields.len() == 3 && !fields[2].is_empty() {
            let ratio: f64 = fields[2]
                .parse()
                .map_err(|_| bad(format!("bad ratio: {}", fields[2])))?;
            overrides.insert(lang, ratio);
        }
    }
    Ok((uniques, overrides))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Initial,
    Intermediate,
    Final,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phase: Phase,
    pub token_budget: u64,
    /// Language probabilities; sums to 1 within 1e-9.
    pub distribution: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub phases: Vec<PhasePlan>,
    pub seed: u64,
}

/// Builds the three-phase schedule. Initial and final phases are uniform
/// over languages with data; the intermediate phase follows the
/// post-upsampling distribution.
pub fn build_schedule(
    budgets: &[LanguageBudget],
    fractions: (f64, f64, f64),
    total_budget: u64,
    seed: u64,
) -> Result<CurriculumSchedule> {
    let (a, b, c) = fractions;
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "phase fractions must sum to 1, got {}",
            a + b + c
        )));
    }
    let with_data: Vec<&LanguageBudget> =
        budgets.iter().filter(|b| b.total_tokens > 0.0).collect();
    if with_data.is_empty() {
        return Err(Error::Validation("no language has any data".into()));
    }
    let uniform: BTreeMap<String, f64> = with_data
        .iter()
        .map(|b| (b.lang.clone(), 1.0 / with_data.len() as f64))
        .collect();
    let natural_total: f64 = with_data.iter().map(|b| b.total_tokens).sum();
    let natural: BTreeMap<String, f64> = with_data
        .iter()
        .map(|b| (b.lang.clone(), b.total_tokens / natural_total))
        .collect();
    let phases = vec![
        PhasePlan {
            phase: Phase::Initial,
            token_budget: (a * total_budget as f64).round() as u64,
            distribution: uniform.clone(),
        },
        PhasePlan {
            phase: Phase::Intermediate,
            token_budget: (b * total_budget as f64).round() as u64,
            distribution: natural,
        },
        PhasePlan {
            phase: Phase::Final,
            token_budget: (c * total_budget as f64).round() as u64,
            distribution: uniform,
        },
    ];
    for plan in &phases {
        let sum: f64 = plan.distribution.values().sum();
        debug_assert!((sum - 1.0).abs() < 1e-9);
    }
    Ok(CurriculumSchedule { phases, seed })
}

/// Token count of one concrete document, as input to manifest emission.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocTokens {
    pub id: String,
    pub lang: String,
    pub tokens: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Shard {
    pub shard_id: u64,
    pub phase: Phase,
    pub lang: String,
    pub doc_ids: Vec<String>,
    pub token_count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardManifest {
    pub shards: Vec<Shard>,
    /// Presentation count per document id.
    pub presentations: BTreeMap<String, u32>,
}

impl ShardManifest {
    /// One JSON record per shard, in order.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for shard in &self.shards {
            out.push_str(
                &serde_json::to_string(shard).map_err(|e| Error::Validation(e.to_string()))?,
            );
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// One language's document rotation: a seeded permutation consumed in
/// order; the pool re-enters (with a fresh permutation) only when fully
/// consumed, and never beyond the presentation cap.
struct Pool {
    docs: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: u32,
    cap: u32,
}

impl Pool {
    fn next(&mut self, lang: &str, rng: &mut ChaCha8Rng) -> Result<usize> {
        if self.pos >= self.order.len() {
            if self.epoch + 1 >= self.cap {
                return Err(Error::PoolExhausted {
                    lang: lang.to_string(),
                    requested: self.epoch + 2,
                    cap: self.cap,
                });
            }
            self.epoch += 1;
            self.pos = 0;
            self.order.shuffle(rng);
        }
        let doc = self.order[self.pos];
        self.pos += 1;
        Ok(doc)
    }

    fn peek_fits(&self, docs: &[DocTokens], capacity: u64) -> bool {
        self.pos < self.order.len() && docs[self.order[self.pos]].tokens <= capacity
            || self.pos >= self.order.len()
    }
}

/// Largest-remainder apportionment of `total` slots by the distribution.
fn apportion(distribution: &BTreeMap<String, f64>, total: u64) -> Vec<(String, u64)> {
    let mut rows: Vec<(String, f64, u64)> = distribution
        .iter()
        .map(|(lang, p)| {
            let exact = p * total as f64;
            (lang.clone(), exact - exact.floor(), exact.floor() as u64)
        })
        .collect();
    let assigned: u64 = rows.iter().map(|(_, _, n)| n).sum();
    let mut leftover = total.saturating_sub(assigned);
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for row in rows.iter_mut() {
        if leftover == 0 {
            break;
        }
        row.2 += 1;
        leftover -= 1;
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    rows.into_iter().map(|(lang, _, n)| (lang, n)).collect()
}

/// Emits the deterministic shard plan for a schedule. The shard-language
/// sequence of each phase is a seeded shuffle of per-language shard quotas
/// apportioned from the phase distribution, which keeps realized shares
/// within about one shard of their targets; each shard then takes documents
/// from its language's rotation until full.
pub fn emit_manifest(
    schedule: &CurriculumSchedule,
    budgets: &[LanguageBudget],
    docs: &[DocTokens],
    shard_size: u64,
) -> Result<ShardManifest> {
    if shard_size == 0 {
        return Err(Error::Config("shard size must be > 0".into()));
    }
    let ratio_by_lang: BTreeMap<&str, f64> = budgets
        .iter()
        .map(|b| (b.lang.as_str(), b.ratio))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut pools: BTreeMap<String, Pool> = BTreeMap::new();
    for (i, doc) in docs.iter().enumerate() {
        let ratio = ratio_by_lang.get(doc.lang.as_str()).copied().unwrap_or(1.0);
        pools
            .entry(doc.lang.clone())
            .or_insert_with(|| Pool {
                docs: Vec::new(),
                order: Vec::new(),
                pos: 0,
                epoch: 0,
                cap: ratio.ceil().max(1.0) as u32,
            })
            .docs
            .push(i);
    }
    for pool in pools.values_mut() {
        pool.order = pool.docs.clone();
        pool.order.shuffle(&mut rng);
    }

    let mut shards = Vec::new();
    let mut presentations: BTreeMap<String, u32> = BTreeMap::new();
    let mut shard_id = 0u64;

    for plan in &schedule.phases {
        for (lang, p) in &plan.distribution {
            if *p > 0.0 && !pools.contains_key(lang) {
                return Err(Error::Validation(format!(
                    "no documents for language {lang}"
                )));
            }
        }
        let n_shards = plan.token_budget.div_ceil(shard_size);
        let mut sequence: Vec<String> = apportion(&plan.distribution, n_shards)
            .into_iter()
            .flat_map(|(lang, n)| std::iter::repeat_n(lang, n as usize))
            .collect();
        sequence.shuffle(&mut rng);
        let mut sequence = sequence.into_iter();

        let mut phase_tokens = 0u64;
        let mut realized: BTreeMap<&String, u64> =
            plan.distribution.keys().map(|l| (l, 0u64)).collect();
        let mut stalled = 0usize;
        while phase_tokens < plan.token_budget && stalled <= plan.distribution.len() {
            // Past the planned sequence (shards under-filled), top up the
            // language furthest below its token target.
            let lang = sequence.next().unwrap_or_else(|| {
                plan.distribution
                    .iter()
                    .map(|(lang, p)| {
                        let target = p * plan.token_budget as f64;
                        let deficit = target - realized[lang] as f64;
                        (lang, deficit)
                    })
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(a.0)))
                    .map(|(lang, _)| lang.clone())
                    .expect("non-empty distribution")
            });
            let capacity = shard_size.min(plan.token_budget - phase_tokens);
            let pool = pools.get_mut(&lang).expect("validated above");
            let mut shard = Shard {
                shard_id,
                phase: plan.phase,
                lang: lang.clone(),
                doc_ids: Vec::new(),
                token_count: 0,
            };
            while shard.token_count < capacity {
                if !pool.peek_fits(docs, capacity - shard.token_count) {
                    break;
                }
                let doc_index = pool.next(&lang, &mut rng)?;
                let doc = &docs[doc_index];
                if doc.tokens > capacity - shard.token_count {
                    // Wrapped onto a permutation whose head no longer fits;
                    // back off without consuming.
                    pool.pos -= 1;
                    break;
                }
                shard.doc_ids.push(doc.id.clone());
                shard.token_count += doc.tokens;
                *presentations.entry(doc.id.clone()).or_insert(0) += 1;
            }
            if shard.doc_ids.is_empty() {
                stalled += 1;
                continue;
            }
            stalled = 0;
            phase_tokens += shard.token_count;
            *realized.get_mut(&lang).expect("seeded above") += shard.token_count;
            shard_id += 1;
            shards.push(shard);
        }
        // Budget conservation: the phase must land within one shard of its
        // budget, otherwise the plan is defective (documents larger than
        // the shard size, or every pool stalled).
        if phase_tokens + shard_size < plan.token_budget {
            return Err(Error::Validation(format!(
                "phase {:?} realized only {phase_tokens} of {} tokens; \
                 no remaining document fits the shard size",
                plan.phase, plan.token_budget
            )));
        }
    }
    Ok(ShardManifest {
        shards,
        presentations,
    })
}
