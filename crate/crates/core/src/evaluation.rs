//! Single-query retrieval metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub id: u32,
    pub cam: u32,
    pub role: Role,
    pub embedding: Vec<f32>,
}

/// Ranks reported in results files.
pub const REPORT_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Scales `v` to unit Euclidean length; zero vectors are left unchanged.
pub fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Gallery indices sorted by ascending distance, ties by index, with entries
/// sharing both identity and camera with the query removed.
pub fn rank_gallery(query: &EvalRecord, gallery: &[EvalRecord]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .filter(|(_, g)| !(g.id == query.id && g.cam == query.cam))
        .map(|(i, g)| (i, squared_distance(&query.embedding, &g.embedding).sqrt()))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Mean over correct matches of the precision at each match's rank; 0 without matches.
pub fn average_precision(correct: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &c) in correct.iter().enumerate() {
        if c {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// `acc[k-1]` is the fraction of queries whose first correct match has rank ≤ k.
/// Queries without a match (`None`) count as misses at every rank.
pub fn cmc(first_correct: &[Option<usize>], max_rank: usize) -> Vec<f64> {
    let n = first_correct.len();
    if n == 0 {
        return vec![0.0; max_rank];
    }
    let mut hist = vec![0usize; max_rank + 1];
    for r in first_correct.iter().flatten() {
        if *r >= 1 && *r <= max_rank {
            hist[*r] += 1;
        }
    }
    let mut acc = Vec::with_capacity(max_rank);
    let mut running = 0;
    for &h in &hist[1..] {
        running += h;
        acc.push(running as f64 / n as f64);
    }
    acc
}

pub fn mean_ap(correct_lists: &[Vec<bool>]) -> f64 {
    if correct_lists.is_empty() {
        return 0.0;
    }
    correct_lists.iter().map(|c| average_precision(c)).sum::<f64>() / correct_lists.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome {
    pub query: usize,
    /// `(gallery index, distance)` in rank order.
    pub ranking: Vec<(usize, f64)>,
    pub correct: Vec<bool>,
    /// One-based rank of the first correct match.
    pub first_correct: Option<usize>,
    pub average_precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Accuracy at ranks `1..=cmc.len()`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub outcomes: Vec<QueryOutcome>,
    /// Queries whose filtered gallery was empty.
    pub excluded: Vec<usize>,
    /// Queries with no correct match in their filtered gallery.
    pub unmatched: Vec<usize>,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc
            .get(k - 1)
            .or(self.cmc.last())
            .copied()
            .unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for k in REPORT_RANKS {
            writeln!(out, "rank{k},{:.6}", self.rank(k)).expect("string write");
        }
        writeln!(out, "mAP,{:.6}", self.map).expect("string write");
        writeln!(out, "queries,{}", self.outcomes.len()).expect("string write");
        writeln!(out, "excluded,{}", self.excluded.len()).expect("string write");
        writeln!(out, "unmatched,{}", self.unmatched.len()).expect("string write");
        out
    }

    /// One line per query: identity, camera, then the top `k` gallery entries
    /// as `id:distance:hit` with `hit` 1 for a correct match.
    pub fn per_query_csv(&self, queries: &[EvalRecord], gallery: &[EvalRecord], k: usize) -> String {
        let mut out = String::from("query,id,cam,first_correct,ap,top\n");
        for o in &self.outcomes {
            let q = &queries[o.query];
            let top: Vec<String> = o
                .ranking
                .iter()
                .zip(&o.correct)
                .take(k)
                .map(|(&(g, d), &c)| format!("{}:{d:.4}:{}", gallery[g].id, c as u8))
                .collect();
            writeln!(
                out,
                "{},{},{},{},{:.6},{}",
                o.query,
                q.id,
                q.cam,
                o.first_correct.map_or("-".to_string(), |r| r.to_string()),
                o.average_precision,
                top.join(" ")
            )
            .expect("string write");
        }
        out
    }
}

pub fn evaluate(queries: &[EvalRecord], gallery: &[EvalRecord], max_rank: usize) -> EvalReport {
    let mut outcomes = Vec::new();
    let mut excluded = Vec::new();
    let mut unmatched = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let ranking = rank_gallery(q, gallery);
        if ranking.is_empty() {
            excluded.push(qi);
            continue;
        }
        let correct: Vec<bool> = ranking.iter().map(|&(g, _)| gallery[g].id == q.id).collect();
        let first_correct = correct.iter().position(|&c| c).map(|p| p + 1);
        if first_correct.is_none() {
            unmatched.push(qi);
        }
        outcomes.push(QueryOutcome {
            query: qi,
            average_precision: average_precision(&correct),
            ranking,
            correct,
            first_correct,
        });
    }
    let firsts: Vec<Option<usize>> = outcomes.iter().map(|o| o.first_correct).collect();
    let lists: Vec<Vec<bool>> = outcomes.iter().map(|o| o.correct.clone()).collect();
    EvalReport {
        cmc: cmc(&firsts, max_rank),
        map: mean_ap(&lists),
        outcomes,
        excluded,
        unmatched,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u32, cam: u32, e: &[f32]) -> EvalRecord {
        EvalRecord {
            id,
            cam,
            role: Role::Gallery,
            embedding: e.to_vec(),
        }
    }

    #[test]
    fn hand_cases() {
        let acc = cmc(&[Some(1), Some(2), Some(4)], 4);
        assert_eq!(acc, vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(average_precision(&[true]), 1.0);
        assert!((average_precision(&[true, false, true]) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false]), 0.0);
    }

    #[test]
    fn exact_copy_ranks_first_and_same_camera_filtered() {
        let q = rec(1, 0, &[1.0, 0.0]);
        let g = vec![
            rec(1, 0, &[1.0, 0.0]),
            rec(2, 1, &[0.0, 1.0]),
            rec(1, 1, &[1.0, 0.0]),
        ];
        let r = rank_gallery(&q, &g);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn ties_break_by_index() {
        let q = rec(0, 0, &[0.0, 0.0]);
        let g = vec![rec(1, 1, &[1.0, 0.0]), rec(2, 1, &[0.0, 1.0])];
        assert_eq!(rank_gallery(&q, &g)[0].0, 0);
    }

    #[test]
    fn normalization() {
        let mut v = vec![3.0f32, 4.0];
        l2_normalize(&mut v);
        assert_eq!(v, vec![0.6, 0.8]);
        let mut z = vec![0.0f32; 3];
        l2_normalize(&mut z);
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn empty_gallery_excludes_query() {
        let q = rec(1, 0, &[1.0]);
        let report = evaluate(&[q], &[rec(1, 0, &[1.0])], 5);
        assert_eq!(report.excluded, vec![0]);
        assert!(report.outcomes.is_empty());
    }
}
