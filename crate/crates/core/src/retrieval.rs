//! Linear-scan descriptor index, ranking with pessimistic ties, and the
//! MAP@K / NAR evaluation protocol.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{shape_mismatch, Error, Result};
use crate::features::{GlobalDescriptor, StoredDescriptors};

/// Published figures on the full catalog, reported next to desk results for
/// orientation only.
pub const REFERENCE_MAP_AT_100_ATRHA_RMAC: f64 = 0.257;
pub const REFERENCE_NAR_ATRHA_CAMSA_MAC: f64 = 0.040;

/// `1 - ||a - b||_2`.
pub fn similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_mismatch(a.len(), b.len()));
    }
    let d2: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(1.0 - d2.sqrt())
}

/// [`similarity`] that also insists on matching method tags.
pub fn descriptor_similarity(a: &GlobalDescriptor, b: &GlobalDescriptor) -> Result<f64> {
    if a.tag != b.tag {
        return Err(Error::InvalidInput(format!("method tags differ: {} vs {}", a.tag, b.tag)));
    }
    similarity(&a.values, &b.values)
}

/// Immutable set of descriptors of one method.
#[derive(Debug, Clone)]
pub struct DescriptorIndex {
    tag: String,
    dim: usize,
    ids: Vec<String>,
    values: Vec<f32>,
    positions: HashMap<String, usize>,
}

impl DescriptorIndex {
    pub fn new(tag: impl Into<String>, dim: usize, ids: Vec<String>, values: Vec<f32>) -> Result<Self> {
        if values.len() != ids.len() * dim {
            return Err(shape_mismatch(ids.len() * dim, values.len()));
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate id {id} in index")));
            }
        }
        Ok(Self {
            tag: tag.into(),
            dim,
            ids,
            values,
            positions,
        })
    }

    pub fn from_store(store: StoredDescriptors) -> Result<Self> {
        Self::new(store.tag, store.dim, store.ids, store.values)
    }

    pub fn from_descriptors(items: Vec<(String, GlobalDescriptor)>) -> Result<Self> {
        let Some((_, first)) = items.first() else {
            return Err(Error::InvalidInput("no descriptors".into()));
        };
        let (tag, dim) = (first.tag.clone(), first.values.len());
        let mut ids = Vec::with_capacity(items.len());
        let mut values = Vec::with_capacity(items.len() * dim);
        for (id, d) in items {
            if d.tag != tag {
                return Err(Error::InvalidInput(format!("mixed method tags {tag} and {}", d.tag)));
            }
            if d.values.len() != dim {
                return Err(shape_mismatch(dim, d.values.len()));
            }
            ids.push(id);
            values.extend(d.values);
        }
        Self::new(tag, dim, ids, values)
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }
}

/// Candidates in decreasing similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: Option<String>,
    pub entries: Vec<(String, f64)>,
}

impl Ranking {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }
}

/// Top-`k` candidates for `q`. Equal similarities are ordered
/// non-relevant first when `relevant` is given (pessimistic evaluation),
/// then by id. `exclude` drops one id, typically the query itself.
pub fn query(
    index: &DescriptorIndex,
    q: &[f32],
    k: usize,
    relevant: Option<&BTreeSet<String>>,
    exclude: Option<&str>,
) -> Result<Ranking> {
    if index.is_empty() {
        return Err(Error::InvalidInput("index is empty".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if q.len() != index.dim {
        return Err(shape_mismatch(index.dim, q.len()));
    }
    let mut scored = Vec::with_capacity(index.len());
    for (i, id) in index.ids.iter().enumerate() {
        if exclude == Some(id.as_str()) {
            continue;
        }
        scored.push((i, similarity(index.row(i), q)?));
    }
    let is_rel = |i: usize| relevant.is_some_and(|r| r.contains(&index.ids[i]));
    scored.sort_by(|&(a, sa), &(b, sb)| {
        sb.total_cmp(&sa)
            .then_with(|| is_rel(a).cmp(&is_rel(b)))
            .then_with(|| index.ids[a].cmp(&index.ids[b]))
    });
    scored.truncate(k);
    Ok(Ranking {
        query_id: None,
        entries: scored.into_iter().map(|(i, s)| (index.ids[i].clone(), s)).collect(),
    })
}

/// `(1 / min(|R|, K)) * sum over hits within the top K of precision at the hit`.
pub fn average_precision_at_k<'a>(
    ranked_ids: impl IntoIterator<Item = &'a str>,
    relevant: &BTreeSet<String>,
    k: usize,
) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::InvalidInput("relevant set is empty".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, id) in ranked_ids.into_iter().take(k).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(total / relevant.len().min(k) as f64)
}

/// Mean AP@K over rankings; each ranking's relevant set is looked up by
/// its query id.
pub fn map_at_k(rankings: &[Ranking], relevance: &HashMap<String, BTreeSet<String>>, k: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::InvalidInput("no rankings".into()));
    }
    let mut total = 0.0;
    for r in rankings {
        let id = r
            .query_id
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("ranking has no query id".into()))?;
        let rel = relevance
            .get(id)
            .ok_or_else(|| Error::UnresolvedIds(vec![id.clone()]))?;
        total += average_precision_at_k(r.ids(), rel, k)?;
    }
    Ok(total / rankings.len() as f64)
}

/// Normalised average rank `(sum R_i - N_rel (N_rel + 1) / 2) / (N N_rel)`
/// with 1-based ranks over the full ranking of `n` items.
pub fn nar<'a>(full_ranking: impl IntoIterator<Item = &'a str>, relevant: &BTreeSet<String>, n: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::InvalidInput("relevant set is empty".into()));
    }
    let mut rank_sum = 0u64;
    let mut found = 0usize;
    let mut seen = 0usize;
    for (i, id) in full_ranking.into_iter().enumerate() {
        seen += 1;
        if relevant.contains(id) {
            rank_sum += (i + 1) as u64;
            found += 1;
        }
    }
    if found != relevant.len() {
        let missing = relevant.len() - found;
        return Err(Error::InvalidInput(format!("{missing} relevant items missing from the ranking")));
    }
    if seen != n {
        return Err(shape_mismatch(format!("ranking of {n} items"), seen));
    }
    let n_rel = relevant.len() as f64;
    Ok((rank_sum as f64 - n_rel * (n_rel + 1.0) / 2.0) / (n as f64 * n_rel))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    /// Drop each query from its own candidate list.
    pub exclude_self: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 100,
            exclude_self: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub relevant: usize,
    pub average_precision: f64,
    pub nar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub k: usize,
    pub exclude_self: bool,
    pub corpus_size: usize,
    pub map_at_k: f64,
    pub mean_nar: f64,
    pub queries: Vec<QueryResult>,
    /// Free-form snapshot of the configuration that produced the index.
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Human-readable summary with the published full-catalog figures.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "method        {}", self.method);
        let _ = writeln!(out, "corpus        {} images, {} queries", self.corpus_size, self.queries.len());
        let _ = writeln!(out, "MAP@{:<9} {:.4}", self.k, self.map_at_k);
        let _ = writeln!(out, "NAR           {:.4}", self.mean_nar);
        let _ = writeln!(
            out,
            "reference     MAP@100 {:.3} (ATRHA_RMAC), NAR {:.3} (ATRHA_CAMSA_MAC), full catalog",
            REFERENCE_MAP_AT_100_ATRHA_RMAC, REFERENCE_NAR_ATRHA_CAMSA_MAC
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<24} {:>4} {:>8} {:>8}", "query", "rel", "AP", "NAR");
        for q in &self.queries {
            let _ = writeln!(
                out,
                "{:<24} {:>4} {:>8.4} {:>8.4}",
                q.query_id, q.relevant, q.average_precision, q.nar
            );
        }
        out
    }

    /// One summary record followed by one record per query.
    pub fn to_jsonl(&self) -> Result<String> {
        let summary = serde_json::json!({
            "record": "summary",
            "method": self.method,
            "k": self.k,
            "exclude_self": self.exclude_self,
            "corpus_size": self.corpus_size,
            "map_at_k": self.map_at_k,
            "nar": self.mean_nar,
            "reference_map_at_100": REFERENCE_MAP_AT_100_ATRHA_RMAC,
            "reference_nar": REFERENCE_NAR_ATRHA_CAMSA_MAC,
            "config": self.config,
        });
        let mut out = serde_json::to_string(&summary)?;
        out.push('\n');
        for q in &self.queries {
            let mut record = serde_json::to_value(q)?;
            record["record"] = "query".into();
            out.push_str(&serde_json::to_string(&record)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Runs every record with `relevant_ids` as a query against `index`.
pub fn evaluate(
    eval_manifest: &DatasetManifest,
    index: &DescriptorIndex,
    options: EvalOptions,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let queries: Vec<_> = eval_manifest
        .records
        .iter()
        .filter_map(|r| r.relevant_ids.as_ref().map(|rel| (r.id.as_str(), rel)))
        .filter(|(_, rel)| !rel.is_empty())
        .collect();
    if queries.is_empty() {
        return Err(Error::InvalidInput("evaluation manifest has no queries".into()));
    }
    let mut unresolved = BTreeSet::new();
    for (id, rel) in &queries {
        for needed in std::iter::once(*id).chain(rel.iter().map(String::as_str)) {
            if index.position(needed).is_none() {
                unresolved.insert(needed.to_string());
            }
        }
    }
    if !unresolved.is_empty() {
        return Err(Error::UnresolvedIds(unresolved.into_iter().collect()));
    }

    let results = queries
        .par_iter()
        .map(|&(id, rel)| {
            let q = index.get(id).expect("resolved above");
            let exclude = options.exclude_self.then_some(id);
            let full = query(index, q, index.len(), Some(rel), exclude)?;
            // a query that lists itself as relevant cannot be found once excluded
            let rel_eff: BTreeSet<String> = match exclude {
                Some(x) if rel.contains(x) => rel.iter().filter(|r| *r != x).cloned().collect(),
                _ => rel.clone(),
            };
            if rel_eff.is_empty() {
                return Err(Error::InvalidInput(format!("query {id} has no relevant items besides itself")));
            }
            Ok(QueryResult {
                query_id: id.to_string(),
                relevant: rel_eff.len(),
                average_precision: average_precision_at_k(full.ids(), &rel_eff, options.k)?,
                nar: nar(full.ids(), &rel_eff, full.entries.len())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = results.len() as f64;
    Ok(EvalReport {
        method: index.tag().to_string(),
        k: options.k,
        exclude_self: options.exclude_self,
        corpus_size: index.len(),
        map_at_k: results.iter().map(|r| r.average_precision).sum::<f64>() / n,
        mean_nar: results.iter().map(|r| r.nar).sum::<f64>() / n,
        queries: results,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn similarity_examples() {
        let a = [1.0f32, 0.0];
        let b = [0.0f32, 1.0];
        assert_eq!(similarity(&a, &a).unwrap(), 1.0);
        assert!((similarity(&a, &b).unwrap() - (1.0 - 2f64.sqrt())).abs() < 1e-12);
        assert_eq!(similarity(&a, &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(similarity(&a, &[1.0]).is_err());
    }

    #[test]
    fn query_examples() {
        let index = DescriptorIndex::new("T", 2, vec!["A".into(), "B".into()], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = query(&index, &[1.0, 0.0], 5, None, None).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec!["A", "B"]);
        assert_eq!(r.entries[0].1, 1.0);

        let twins = DescriptorIndex::new("T", 1, vec!["a".into(), "b".into()], vec![1.0, 1.0]).unwrap();
        let r = query(&twins, &[1.0], 2, Some(&set(&["a"])), None).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec!["b", "a"]);
        let r = query(&twins, &[1.0], 2, Some(&set(&["b"])), None).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn ap_examples() {
        let rel = set(&["x", "z"]);
        let ap = average_precision_at_k(["x", "y", "z"], &rel, 3).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision_at_k(["x", "z", "y"], &rel, 3).unwrap(), 1.0);
        assert_eq!(average_precision_at_k(["y", "w"], &rel, 2).unwrap(), 0.0);
        assert!(average_precision_at_k(["y"], &set(&[]), 2).is_err());
    }

    #[test]
    fn nar_examples() {
        let ids: Vec<String> = (1..=10).map(|i| i.to_string()).collect();
        let ranked = ids.iter().map(String::as_str);
        assert_eq!(nar(ranked.clone(), &set(&["1", "2"]), 10).unwrap(), 0.0);
        assert!((nar(ranked.clone(), &set(&["9", "10"]), 10).unwrap() - 0.8).abs() < 1e-12);
        assert!(nar(ranked, &set(&["11"]), 10).is_err());
    }

    #[test]
    fn map_examples() {
        let mut relevance = HashMap::new();
        relevance.insert("q1".to_string(), set(&["a"]));
        relevance.insert("q2".to_string(), set(&["a"]));
        let r1 = Ranking { query_id: Some("q1".into()), entries: vec![("a".into(), 1.0), ("b".into(), 0.0)] };
        let r2 = Ranking { query_id: Some("q2".into()), entries: vec![("b".into(), 1.0), ("a".into(), 0.0)] };
        assert_eq!(map_at_k(std::slice::from_ref(&r1), &relevance, 2).unwrap(), 1.0);
        assert_eq!(map_at_k(&[r1, r2], &relevance, 2).unwrap(), 0.75);
    }

    #[test]
    fn empty_eval_manifest_rejected() {
        let index = DescriptorIndex::new("T", 1, vec!["a".into()], vec![1.0]).unwrap();
        let manifest = DatasetManifest::new(crate::dataset::Purpose::Eval, Vec::new());
        assert!(evaluate(&manifest, &index, EvalOptions::default(), serde_json::Value::Null).is_err());
    }

    #[test]
    fn unresolved_ids_listed() {
        use crate::dataset::{ImageRecord, Purpose};
        let index = DescriptorIndex::new("T", 1, vec!["a".into()], vec![1.0]).unwrap();
        let manifest = DatasetManifest::new(
            Purpose::Eval,
            vec![ImageRecord::new("a", "a.png").with_relevant(["b", "c"])],
        );
        match evaluate(&manifest, &index, EvalOptions::default(), serde_json::Value::Null) {
            Err(Error::UnresolvedIds(ids)) => assert_eq!(ids, vec!["b", "c"]),
            other => panic!("{other:?}"),
        }
    }
}
