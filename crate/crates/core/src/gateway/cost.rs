use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GatewayError, GenerationRecord};

/// USD per 1,000 tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub prompt_per_1k: f64,
    pub completion_per_1k: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable {
    pub models: BTreeMap<String, ModelPrice>,
}

impl PriceTable {
    pub fn price(&self, model: &str) -> Result<ModelPrice, GatewayError> {
        self.models.get(model).copied().ok_or_else(|| GatewayError::UnknownModel(model.to_string()))
    }

    pub fn call_cost(&self, model: &str, prompt_tokens: u64, completion_tokens: u64) -> Result<f64, GatewayError> {
        let p = self.price(model)?;
        Ok(prompt_tokens as f64 / 1000.0 * p.prompt_per_1k
            + completion_tokens as f64 / 1000.0 * p.completion_per_1k)
    }
}

/// Total cost of recorded calls.
pub fn estimate_cost(records: &[GenerationRecord], prices: &PriceTable) -> Result<f64, GatewayError> {
    records
        .iter()
        .map(|r| prices.call_cost(&r.model, r.prompt_tokens, r.completion_tokens))
        .sum()
}

/// Cost of `calls` calls with the given mean token counts.
pub fn estimate_plan(
    model: &str,
    calls: u64,
    mean_prompt_tokens: f64,
    mean_completion_tokens: f64,
    prices: &PriceTable,
) -> Result<f64, GatewayError> {
    let p = prices.price(model)?;
    Ok(calls as f64
        * (mean_prompt_tokens / 1000.0 * p.prompt_per_1k
            + mean_completion_tokens / 1000.0 * p.completion_per_1k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> PriceTable {
        let mut t = PriceTable::default();
        t.models.insert("gpt-4-0613".into(), ModelPrice { prompt_per_1k: 0.03, completion_per_1k: 0.06 });
        t
    }

    fn rec(pt: u64, ct: u64) -> GenerationRecord {
        GenerationRecord {
            request_id: "x".into(),
            template_id: "t".into(),
            model: "gpt-4-0613".into(),
            prompt: String::new(),
            response: String::new(),
            backend: "remote".into(),
            timestamp: 0,
            prompt_tokens: pt,
            completion_tokens: ct,
        }
    }

    #[test]
    fn arithmetic() {
        assert_eq!(estimate_cost(&[], &table()).unwrap(), 0.0);
        let c = estimate_cost(&[rec(1000, 500)], &table()).unwrap();
        assert!((c - 0.06).abs() < 1e-12);
    }

    #[test]
    fn plan_scales_with_calls() {
        let recs: Vec<_> = (0..7).map(|i| rec(900 + i * 20, 40 + i)).collect();
        let n = recs.len() as f64;
        let mp = recs.iter().map(|r| r.prompt_tokens as f64).sum::<f64>() / n;
        let mc = recs.iter().map(|r| r.completion_tokens as f64).sum::<f64>() / n;
        let plan = estimate_plan("gpt-4-0613", 7, mp, mc, &table()).unwrap();
        let direct = estimate_cost(&recs, &table()).unwrap();
        assert!((plan - direct).abs() < 1e-12);
        let one = estimate_plan("gpt-4-0613", 1, mp, mc, &table()).unwrap();
        assert!((plan - 7.0 * one).abs() < 1e-12);
    }

    #[test]
    fn unknown_model() {
        let mut r = rec(1, 1);
        r.model = "other".into();
        assert!(matches!(estimate_cost(&[r], &table()), Err(GatewayError::UnknownModel(m)) if m == "other"));
    }
}
