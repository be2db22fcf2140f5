//! Exact inner-product search, TREC run/qrels files and ranking metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BottleneckModel, DenseVector};
use crate::textcorpus::Passage;

pub const INDEX_MANIFEST: &str = "index.json";
pub const INDEX_BLOB: &str = "vectors.f32";

/// Passage vectors (row-major `N×d`) aligned with `pids`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseIndex {
    pids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
    fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexManifest {
    format: String,
    dtype: String,
    dim: usize,
    count: usize,
    fingerprint: String,
    pids: Vec<String>,
}

impl DenseIndex {
    pub fn from_vectors(pids: Vec<String>, vectors: Vec<DenseVector>, fingerprint: String) -> Result<Self> {
        if pids.len() != vectors.len() {
            return Err(Error::shape(
                "index",
                format!("{} pids for {} vectors", pids.len(), vectors.len()),
            ));
        }
        let dim = vectors.first().map_or(0, |v| v.dim());
        let mut data = Vec::with_capacity(dim * vectors.len());
        for v in &vectors {
            if v.dim() != dim {
                return Err(Error::DimMismatch {
                    left: v.dim(),
                    right: dim,
                });
            }
            data.extend_from_slice(v.as_slice());
        }
        Ok(Self {
            pids,
            dim,
            data,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pids(&self) -> &[String] {
        &self.pids
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact top-`k` by inner product; ties go to the smaller pid. Returns
    /// all rows when `k` exceeds the index size.
    pub fn search(&self, h_q: &DenseVector, k: usize) -> Result<Vec<(String, f64)>> {
        if h_q.dim() != self.dim {
            return Err(Error::DimMismatch {
                left: h_q.dim(),
                right: self.dim,
            });
        }
        let q = h_q.as_slice();
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| (i, self.row(i).iter().zip(q).map(|(a, b)| a * b).sum()))
            .collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.total_cmp(&a.1).then_with(|| self.pids[a.0].cmp(&self.pids[b.0]))
        };
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored
            .into_iter()
            .map(|(i, s)| (self.pids[i].clone(), s))
            .collect())
    }

    /// Search guarded by the fingerprint of the model that encoded the query.
    pub fn search_with(&self, model_fingerprint: &str, h_q: &DenseVector, k: usize) -> Result<Vec<(String, f64)>> {
        self.check_fingerprint(model_fingerprint)?;
        self.search(h_q, k)
    }

    pub fn check_fingerprint(&self, model_fingerprint: &str) -> Result<()> {
        if self.fingerprint != model_fingerprint {
            return Err(Error::FingerprintMismatch {
                index: self.fingerprint.clone(),
                model: model_fingerprint.to_string(),
            });
        }
        Ok(())
    }

    /// Writes `index.json` and a little-endian f32 blob.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = IndexManifest {
            format: "mtmae-index-v1".into(),
            dtype: "f32".into(),
            dim: self.dim,
            count: self.len(),
            fingerprint: self.fingerprint.clone(),
            pids: self.pids.clone(),
        };
        let path = dir.join(INDEX_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        let blob: Vec<u8> = self.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        let path = dir.join(INDEX_BLOB);
        fs::write(&path, blob).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: IndexManifest = serde_json::from_str(&text)?;
        if m.dtype != "f32" || m.pids.len() != m.count {
            return Err(Error::Checkpoint(format!("malformed index manifest {}", path.display())));
        }
        let path = dir.join(INDEX_BLOB);
        let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if blob.len() != m.count * m.dim * 4 {
            return Err(Error::Checkpoint(format!(
                "index blob has {} bytes, expected {}",
                blob.len(),
                m.count * m.dim * 4
            )));
        }
        let data = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            pids: m.pids,
            dim: m.dim,
            data,
            fingerprint: m.fingerprint,
        })
    }
}

/// Row `i` is the CLS vector of the unmasked passage `i`.
pub fn encode_corpus(model: &BottleneckModel, passages: &[Passage]) -> Result<DenseIndex> {
    let vectors: Vec<DenseVector> = passages
        .par_iter()
        .map(|p| model.embed_sequence(&p.token_ids))
        .collect::<Result<_>>()?;
    DenseIndex::from_vectors(
        passages.iter().map(|p| p.pid.clone()).collect(),
        vectors,
        model.fingerprint(),
    )
}

/// qid → ranked `(pid, score)` list.
pub type Run = BTreeMap<String, Vec<(String, f64)>>;
/// qid → pid → grade.
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

/// Searches every query; parallel over queries, output ordered by qid.
pub fn search_all(index: &DenseIndex, queries: &[(String, DenseVector)], k: usize) -> Result<Run> {
    let hits: Vec<(String, Vec<(String, f64)>)> = queries
        .par_iter()
        .map(|(qid, v)| Ok((qid.clone(), index.search(v, k)?)))
        .collect::<Result<_>>()?;
    Ok(hits.into_iter().collect())
}

/// `qid Q0 pid rank score tag`, ranks from 1.
pub fn write_run(path: &Path, run: &Run, tag: &str) -> Result<()> {
    let mut s = String::new();
    for (qid, hits) in run {
        for (r, (pid, score)) in hits.iter().enumerate() {
            let _ = writeln!(s, "{qid} Q0 {pid} {} {score} {tag}", r + 1);
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_run(path: &Path) -> Result<Run> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ranked: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(Error::parse(path, n + 1, "expected `qid Q0 pid rank score tag`"));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, n + 1, format!("bad rank {:?}", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| Error::parse(path, n + 1, format!("bad score {:?}", cols[4])))?;
        ranked
            .entry(cols[0].to_string())
            .or_default()
            .push((rank, cols[2].to_string(), score));
    }
    Ok(ranked
        .into_iter()
        .map(|(qid, mut hits)| {
            hits.sort_by_key(|h| h.0);
            (qid, hits.into_iter().map(|(_, p, s)| (p, s)).collect())
        })
        .collect())
}

/// TREC qrels: `qid 0 pid grade`.
pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut qrels = Qrels::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(Error::parse(path, n + 1, "expected `qid 0 pid grade`"));
        }
        let grade: u32 = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, n + 1, format!("grade {:?} is not a non-negative integer", cols[3])))?;
        qrels
            .entry(cols[0].to_string())
            .or_default()
            .insert(cols[2].to_string(), grade);
    }
    Ok(qrels)
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let mut s = String::new();
    for (qid, judged) in qrels {
        for (pid, grade) in judged {
            let _ = writeln!(s, "{qid} 0 {pid} {grade}");
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub mrr: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cutoffs: Vec<usize>,
    pub mean: QueryMetrics,
    pub per_query: BTreeMap<String, QueryMetrics>,
    pub evaluated_queries: usize,
    /// Run queries with no qrels entry.
    pub excluded_unjudged: usize,
    /// Judged queries without any grade >= 1.
    pub excluded_no_relevant: usize,
}

impl MetricsReport {
    pub fn mrr(&self, k: usize) -> f64 {
        self.mean.mrr.get(&k).copied().unwrap_or(0.0)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.mean.recall.get(&k).copied().unwrap_or(0.0)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.mean.ndcg.get(&k).copied().unwrap_or(0.0)
    }

    pub fn summary(&self) -> String {
        let mut parts = Vec::new();
        for &k in &self.cutoffs {
            parts.push(format!("MRR@{k}={:.4}", self.mrr(k)));
        }
        for &k in &self.cutoffs {
            parts.push(format!("R@{k}={:.4}", self.recall(k)));
        }
        for &k in &self.cutoffs {
            parts.push(format!("nDCG@{k}={:.4}", self.ndcg(k)));
        }
        format!("{} ({} queries)", parts.join(" "), self.evaluated_queries)
    }
}

fn query_metrics(hits: &[(String, f64)], judged: &BTreeMap<String, u32>, cutoffs: &[usize]) -> QueryMetrics {
    let relevant = judged.values().filter(|&&g| g >= 1).count();
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let discount = |rank: usize| (rank as f64 + 1.0).log2();
    let grade = |pid: &str| judged.get(pid).copied().unwrap_or(0);
    let mut m = QueryMetrics::default();
    for &k in cutoffs {
        let top = &hits[..hits.len().min(k)];
        let first = top.iter().position(|(p, _)| grade(p) >= 1);
        m.mrr.insert(k, first.map_or(0.0, |i| 1.0 / (i + 1) as f64));
        let found = top.iter().filter(|(p, _)| grade(p) >= 1).count();
        m.recall.insert(k, found as f64 / relevant as f64);
        let dcg: f64 = top
            .iter()
            .enumerate()
            .map(|(i, (p, _))| gain(grade(p)) / discount(i + 1))
            .sum();
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| gain(g) / discount(i + 1))
            .sum();
        m.ndcg.insert(k, if idcg > 0.0 { dcg / idcg } else { 0.0 });
    }
    m
}

/// MRR@k, Recall@k and nDCG@k (gain `2^g - 1`, discount `log2(rank + 1)`)
/// averaged over run queries that have at least one relevant judgment.
pub fn evaluate(run: &Run, qrels: &Qrels, cutoffs: &[usize]) -> Result<MetricsReport> {
    let mut per_query = BTreeMap::new();
    let mut excluded_unjudged = 0;
    let mut excluded_no_relevant = 0;
    for (qid, hits) in run {
        let Some(judged) = qrels.get(qid) else {
            excluded_unjudged += 1;
            continue;
        };
        if !judged.values().any(|&g| g >= 1) {
            excluded_no_relevant += 1;
            continue;
        }
        per_query.insert(qid.clone(), query_metrics(hits, judged, cutoffs));
    }
    if per_query.is_empty() {
        return Err(Error::NoJudgedQueries);
    }
    let n = per_query.len() as f64;
    let mut mean = QueryMetrics::default();
    for &k in cutoffs {
        let avg = |f: &dyn Fn(&QueryMetrics) -> f64| per_query.values().map(f).sum::<f64>() / n;
        mean.mrr.insert(k, avg(&|q| q.mrr[&k]));
        mean.recall.insert(k, avg(&|q| q.recall[&k]));
        mean.ndcg.insert(k, avg(&|q| q.ndcg[&k]));
    }
    Ok(MetricsReport {
        cutoffs: cutoffs.to_vec(),
        mean,
        evaluated_queries: per_query.len(),
        per_query,
        excluded_unjudged,
        excluded_no_relevant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn idx(rows: &[&[f64]]) -> DenseIndex {
        DenseIndex::from_vectors(
            (1..=rows.len()).map(|i| format!("p{i}")).collect(),
            rows.iter().map(|r| DenseVector(r.to_vec())).collect(),
            "fp".into(),
        )
        .unwrap()
    }

    fn run_of(hits: &[&str]) -> Run {
        let mut r = Run::new();
        r.insert(
            "q".into(),
            hits.iter().enumerate().map(|(i, p)| (p.to_string(), -(i as f64))).collect(),
        );
        r
    }

    fn qrels_of(pairs: &[(&str, u32)]) -> Qrels {
        let mut q = Qrels::new();
        q.insert("q".into(), pairs.iter().map(|(p, g)| (p.to_string(), *g)).collect());
        q
    }

    #[test]
    fn worked_search_example() {
        let index = idx(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let hits = index.search(&DenseVector(vec![1.0, 0.1]), 3).unwrap();
        let pids: Vec<&str> = hits.iter().map(|h| h.0.as_str()).collect();
        assert_eq!(pids, ["p3", "p1", "p2"]);
        assert!((hits[0].1 - 1.1).abs() < 1e-12);
        assert_eq!(index.search(&DenseVector(vec![1.0, 0.1]), 10).unwrap().len(), 3);
    }

    #[test]
    fn ties_go_to_smaller_pid() {
        let index = DenseIndex::from_vectors(
            vec!["b".into(), "a".into(), "c".into()],
            vec![DenseVector(vec![1.0]); 3],
            String::new(),
        )
        .unwrap();
        let hits = index.search(&DenseVector(vec![2.0]), 2).unwrap();
        assert_eq!(hits[0].0, "a");
        assert_eq!(hits[1].0, "b");
    }

    #[test]
    fn fingerprint_guard_and_dim_check() {
        let index = idx(&[&[1.0, 0.0]]);
        assert!(matches!(
            index.search_with("other", &DenseVector(vec![1.0, 0.0]), 1),
            Err(Error::FingerprintMismatch { .. })
        ));
        assert!(index.search(&DenseVector(vec![1.0]), 1).is_err());
    }

    #[test]
    fn matches_naive_scan() {
        let mut r = rng::stream(3, &["scan"]);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..8).map(|_| (r.random_range(-3..=3)) as f64 * 0.5).collect())
            .collect();
        let pids: Vec<String> = (0..200).map(|i| format!("p{i:03}")).collect();
        let index = DenseIndex::from_vectors(
            pids.clone(),
            rows.iter().cloned().map(DenseVector).collect(),
            String::new(),
        )
        .unwrap();
        for _ in 0..50 {
            let q: Vec<f64> = (0..8).map(|_| r.random_range(-2..=2) as f64).collect();
            let mut naive: Vec<(String, f64)> = rows
                .iter()
                .zip(&pids)
                .map(|(row, p)| (p.clone(), row.iter().zip(&q).map(|(a, b)| a * b).sum()))
                .collect();
            naive.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            naive.truncate(17);
            assert_eq!(index.search(&DenseVector(q), 17).unwrap(), naive);
        }
    }

    #[test]
    fn index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let index = idx(&[&[0.5, -1.25], &[2.0, 0.0]]);
        index.save(dir.path()).unwrap();
        assert_eq!(DenseIndex::load(dir.path()).unwrap(), index);
    }

    #[test]
    fn mrr_examples() {
        let q = qrels_of(&[("c", 1)]);
        let rep = evaluate(&run_of(&["a", "b", "c"]), &q, &[10]).unwrap();
        assert!((rep.mrr(10) - 1.0 / 3.0).abs() < 1e-12);

        let mut run = run_of(&["x", "a"]);
        run.insert("q2".into(), vec![("w".into(), 0.0), ("x".into(), 0.0), ("y".into(), 0.0), ("r".into(), 0.0)]);
        let mut qrels = qrels_of(&["x"].map(|p| (p, 1)));
        qrels.insert("q2".into(), [("r".to_string(), 1)].into_iter().collect());
        // q: first relevant at rank 1; q2: rank 4
        let rep = evaluate(&run, &qrels, &[10]).unwrap();
        assert!((rep.mrr(10) - 0.625).abs() < 1e-12);
    }

    #[test]
    fn ndcg_example() {
        let rep = evaluate(&run_of(&["a", "b"]), &qrels_of(&[("b", 1)]), &[10]).unwrap();
        assert!((rep.ndcg(10) - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((rep.ndcg(10) - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn unjudged_queries_excluded_and_counted() {
        let mut run = run_of(&["a"]);
        run.insert("other".into(), vec![("a".into(), 1.0)]);
        let rep = evaluate(&run, &qrels_of(&[("a", 1)]), &[1]).unwrap();
        assert_eq!(rep.evaluated_queries, 1);
        assert_eq!(rep.excluded_unjudged, 1);
        assert!(matches!(evaluate(&run_of(&["a"]), &Qrels::new(), &[1]), Err(Error::NoJudgedQueries)));
    }

    #[test]
    fn perfect_run() {
        let rep = evaluate(&run_of(&["a", "b", "c"]), &qrels_of(&[("a", 2), ("b", 1)]), &[1, 2, 10]).unwrap();
        assert_eq!(rep.mrr(10), 1.0);
        assert!((rep.ndcg(10) - 1.0).abs() < 1e-12);
        assert_eq!(rep.recall(2), 1.0);
        assert_eq!(rep.recall(1), 0.5);
    }

    #[test]
    fn run_and_qrels_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let run = run_of(&["a", "b"]);
        write_run(&dir.path().join("run.trec"), &run, "t").unwrap();
        assert_eq!(read_run(&dir.path().join("run.trec")).unwrap(), run);
        let q = qrels_of(&[("a", 1), ("z", 0)]);
        write_qrels(&dir.path().join("qrels"), &q).unwrap();
        assert_eq!(read_qrels(&dir.path().join("qrels")).unwrap(), q);
        fs::write(dir.path().join("bad"), "q 0 a -1\n").unwrap();
        assert!(matches!(read_qrels(&dir.path().join("bad")), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_monotone(
            ranking in proptest::sample::subsequence((0..30).collect::<Vec<usize>>(), 1..30).prop_shuffle(),
            rel in proptest::collection::btree_map(0usize..30, 0u32..4, 1..8),
            c in 0.1f64..10.0,
        ) {
            let hits: Vec<(String, f64)> = ranking.iter().enumerate()
                .map(|(i, p)| (format!("p{p:02}"), -(i as f64))).collect();
            let judged: BTreeMap<String, u32> = rel.iter().map(|(p, g)| (format!("p{p:02}"), *g)).collect();
            prop_assume!(judged.values().any(|&g| g >= 1));
            let mut run = Run::new();
            run.insert("q".into(), hits.clone());
            let mut qrels = Qrels::new();
            qrels.insert("q".into(), judged);
            let cut = [1, 3, 5, 10, 30];
            let rep = evaluate(&run, &qrels, &cut).unwrap();
            for w in cut.windows(2) {
                prop_assert!(rep.recall(w[0]) <= rep.recall(w[1]) + 1e-12);
                prop_assert!(rep.mrr(w[0]) <= rep.mrr(w[1]) + 1e-12);
            }
            for &k in &cut {
                for v in [rep.mrr(k), rep.recall(k), rep.ndcg(k)] {
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
                }
            }
            // rank-only dependence
            let scaled: Run = run.iter().map(|(q, h)| (q.clone(), h.iter().map(|(p, s)| (p.clone(), s * c)).collect())).collect();
            prop_assert_eq!(evaluate(&scaled, &qrels, &cut).unwrap().mean, rep.mean);
        }
    }
}
