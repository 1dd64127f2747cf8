//! Source attribution: rank domain codes by `p(c|x) ∝ p(x|c)·p(c)`.

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{ControlCodeRegistry, TextAssets};
use crate::model::{ModelError, ScoreModel};

/// Shown with every attribution result.
pub const VERACITY_CAVEAT: &str = "Attribution ranks training domains by how well each explains the text. \
It reflects correlations in the training data and says nothing about whether the text is true.";

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("empty query")]
    EmptyQuery,
    #[error("attribution needs at least two domain codes, found {0}")]
    TooFewDomains(usize),
    #[error("prior has {got} entries for {want} domain codes")]
    PriorLength { got: usize, want: usize },
    #[error("prior entries must be positive and finite")]
    BadPrior,
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AttributionError>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttributionOptions {
    /// One weight per domain code in registry order; normalized internally.
    /// `None` is the uniform prior.
    pub prior: Option<Vec<f64>>,
    /// Use the per-token average log-likelihood instead of the sum.
    pub length_normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainScore {
    pub code: String,
    pub id: u32,
    /// Natural-log `log p(x|c)`.
    pub loglik: f64,
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionResult {
    /// Descending posterior; ties keep registry order.
    pub ranking: Vec<DomainScore>,
    pub query: Vec<u32>,
    /// Forward windows per code; more than one means the query was longer
    /// than the model context and was scored in overlapping windows.
    pub windows: usize,
}

impl AttributionResult {
    pub fn top(&self) -> &DomainScore {
        &self.ranking[0]
    }

    /// Plain-text table followed by the caveat.
    pub fn to_table(&self) -> String {
        let width = self.ranking.iter().map(|r| r.code.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}  {:>14}  {:>9}\n", "code", "log p(x|c)", "p(c|x)");
        for r in &self.ranking {
            out.push_str(&format!("{:<width$}  {:>14.4}  {:>9.6}\n", r.code, r.loglik, r.posterior));
        }
        if self.windows > 1 {
            out.push_str(&format!("(query scored in {} sliding windows)\n", self.windows));
        }
        out.push_str(VERACITY_CAVEAT);
        out.push('\n');
        out
    }
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}

/// `Σ_i log p(x_i | c, x_<i)`. Queries longer than `L` tokens are scored in
/// windows of `L` predicted tokens advancing by half a window; each
/// token is scored once, in the first window that covers it. Returns the
/// log-likelihood and the number of windows used.
pub fn sequence_loglik<M: ScoreModel + ?Sized>(model: &M, code: u32, query: &[u32]) -> Result<(f64, usize)> {
    if query.is_empty() {
        return Err(AttributionError::EmptyQuery);
    }
    let vocab = model.vocab_size();
    if let Some(&id) = std::iter::once(&code).chain(query).find(|&&id| id as usize >= vocab) {
        return Err(AttributionError::TokenOutOfRange { id, vocab });
    }
    let span = model.context_len().max(1);
    let stride = (span / 2).max(1);
    let mut total = 0.0;
    let mut scored = 0;
    let mut windows = 0;
    let mut start = 0;
    let mut input = Vec::with_capacity(span + 1);
    loop {
        let end = (start + span).min(query.len());
        // Inputs are the code plus the window minus its last token; row `j`
        // predicts query[start + j].
        input.clear();
        input.push(code);
        input.extend_from_slice(&query[start..end - 1]);
        let scores = model.scores(&input)?;
        windows += 1;
        for pos in scored.max(start)..end {
            total += log_softmax_at(scores.row(pos - start), query[pos] as usize);
        }
        scored = end;
        if end == query.len() {
            return Ok((total, windows));
        }
        start += stride;
    }
}

/// Rank every domain code in `registry` for the token ids `query`.
pub fn attribute_ids<M: ScoreModel + ?Sized>(
    model: &M,
    registry: &ControlCodeRegistry,
    query: &[u32],
    options: &AttributionOptions,
) -> Result<AttributionResult> {
    if query.is_empty() {
        return Err(AttributionError::EmptyQuery);
    }
    let domains: Vec<(u32, String)> = registry.domains().map(|(id, c)| (id, c.name.clone())).collect();
    if domains.len() < 2 {
        return Err(AttributionError::TooFewDomains(domains.len()));
    }
    let log_prior: Vec<f64> = match &options.prior {
        None => vec![0.0; domains.len()],
        Some(p) if p.len() != domains.len() => {
            return Err(AttributionError::PriorLength {
                got: p.len(),
                want: domains.len(),
            })
        }
        Some(p) => {
            if p.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
                return Err(AttributionError::BadPrior);
            }
            let z: f64 = p.iter().sum();
            p.iter().map(|w| (w / z).ln()).collect()
        }
    };

    let mut ranking = Vec::with_capacity(domains.len());
    let mut logits = Vec::with_capacity(domains.len());
    let mut windows = 0;
    for ((id, code), lp) in domains.into_iter().zip(&log_prior) {
        let (loglik, w) = sequence_loglik(model, id, query)?;
        windows = w;
        let evidence = if options.length_normalize {
            loglik / query.len() as f64
        } else {
            loglik
        };
        logits.push(evidence + lp);
        ranking.push(DomainScore {
            code,
            id,
            loglik,
            posterior: 0.0,
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    for (r, w) in ranking.iter_mut().zip(weights) {
        r.posterior = w / z;
    }
    ranking.sort_by(|a, b| b.posterior.total_cmp(&a.posterior));
    Ok(AttributionResult {
        ranking,
        query: query.to_vec(),
        windows,
    })
}

/// Tokenize `text` and rank the domain codes.
pub fn attribute<M: ScoreModel + ?Sized>(
    model: &M,
    assets: &TextAssets,
    text: &str,
    options: &AttributionOptions,
) -> Result<AttributionResult> {
    let ids = assets.tokenizer.encode(text);
    attribute_ids(model, &assets.registry, &ids, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Scores depend only on the code at position 0: code 1 favours token 3,
    /// code 2 favours token 4, anything else is flat.
    struct CodeBias {
        context: usize,
    }

    impl ScoreModel for CodeBias {
        fn context_len(&self) -> usize {
            self.context
        }
        fn vocab_size(&self) -> usize {
            6
        }
        fn scores(&self, ids: &[u32]) -> crate::model::Result<Tensor<f64>> {
            assert!(ids.len() <= self.context);
            let mut row = vec![0.0; 6];
            match ids[0] {
                1 => row[3] = 2.0,
                2 => row[4] = 2.0,
                _ => {}
            }
            let data: Vec<f64> = row.iter().copied().cycle().take(6 * ids.len()).collect();
            Ok(Tensor::new(vec![ids.len(), 6], data).unwrap())
        }
    }

    fn registry() -> ControlCodeRegistry {
        let mut r = ControlCodeRegistry::new();
        r.add_domain("Alpha").unwrap();
        r.add_domain("Beta").unwrap();
        r.add_secondary("Title:").unwrap();
        r
    }

    #[test]
    fn single_token_matches_one_forward() {
        let m = CodeBias { context: 8 };
        let (ll, w) = sequence_loglik(&m, 1, &[3]).unwrap();
        let z = 5.0 + 2f64.exp();
        assert!((ll - (2.0 - z.ln())).abs() < 1e-12);
        assert_eq!(w, 1);
    }

    #[test]
    fn long_queries_use_windows_and_score_each_token_once() {
        let m = CodeBias { context: 5 };
        let q = vec![3u32; 19];
        let (ll, w) = sequence_loglik(&m, 1, &q).unwrap();
        let per = 2.0 - (5.0 + 2f64.exp()).ln();
        assert!((ll - 19.0 * per).abs() < 1e-9);
        assert!(w > 1);
    }

    #[test]
    fn posteriors_and_ordering() {
        let m = CodeBias { context: 8 };
        let res = attribute_ids(&m, &registry(), &[4, 4, 4], &AttributionOptions::default()).unwrap();
        assert_eq!(res.ranking.len(), 2);
        assert_eq!(res.top().code, "Beta");
        let sum: f64 = res.ranking.iter().map(|r| r.posterior).sum();
        assert!((sum - 1.0).abs() < 1e-12);

        let tie = attribute_ids(&m, &registry(), &[5, 0], &AttributionOptions::default()).unwrap();
        assert_eq!(tie.ranking[0].code, "Alpha");
        assert_eq!(tie.ranking[1].code, "Beta");
        assert!((tie.ranking[0].posterior - 0.5).abs() < 1e-12);
    }

    #[test]
    fn prior_shifts_posterior() {
        let m = CodeBias { context: 8 };
        let opts = AttributionOptions {
            prior: Some(vec![1.0, 3.0]),
            ..Default::default()
        };
        let res = attribute_ids(&m, &registry(), &[5], &opts).unwrap();
        assert_eq!(res.top().code, "Beta");
        assert!((res.top().posterior - 0.75).abs() < 1e-12);
        let bad = AttributionOptions {
            prior: Some(vec![1.0]),
            ..Default::default()
        };
        assert!(attribute_ids(&m, &registry(), &[5], &bad).is_err());
    }

    #[test]
    fn errors() {
        let m = CodeBias { context: 8 };
        assert!(matches!(
            attribute_ids(&m, &registry(), &[], &AttributionOptions::default()),
            Err(AttributionError::EmptyQuery)
        ));
        let mut one = ControlCodeRegistry::new();
        one.add_domain("Solo").unwrap();
        assert!(matches!(
            attribute_ids(&m, &one, &[3], &AttributionOptions::default()),
            Err(AttributionError::TooFewDomains(1))
        ));
    }

    #[test]
    fn table_carries_caveat() {
        let m = CodeBias { context: 8 };
        let res = attribute_ids(&m, &registry(), &[3, 3], &AttributionOptions::default()).unwrap();
        let table = res.to_table();
        assert!(table.contains("Alpha"));
        assert!(table.ends_with(&format!("{VERACITY_CAVEAT}\n")));
    }
}
