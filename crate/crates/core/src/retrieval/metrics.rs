use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codes::{hamming_packed, CodeBook};
use crate::error::{ensure_arg, Error, Result};

/// Database entries for one query, nearest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub query_id: String,
    /// (database index, Hamming distance).
    pub entries: Vec<(usize, u32)>,
}

fn check_books(queries: &CodeBook, database: &CodeBook) -> Result<()> {
    ensure_arg!(!database.is_empty(), "database is empty");
    ensure_arg!(!queries.is_empty(), "query set is empty");
    ensure_arg!(
        queries.bits() == database.bits(),
        "query codes have {} bits, database codes {}",
        queries.bits(),
        database.bits()
    );
    Ok(())
}

/// Ranks the database by Hamming distance to query `q`, ties broken by
/// ascending id. Entries sharing the query's id are left out.
pub fn rank(queries: &CodeBook, q: usize, database: &CodeBook) -> Result<RankedList> {
    check_books(queries, database)?;
    Ok(rank_unchecked(queries, q, database))
}

fn rank_unchecked(queries: &CodeBook, q: usize, database: &CodeBook) -> RankedList {
    let qid = &queries.ids()[q];
    let qcode = queries.code_bytes(q);
    let bits = queries.bits();
    let mut entries: Vec<(usize, u32)> = (0..database.len())
        .filter(|&i| database.ids()[i] != *qid)
        .map(|i| (i, hamming_packed(qcode, database.code_bytes(i), bits)))
        .collect();
    let ids = database.ids();
    entries.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| ids[a.0].cmp(&ids[b.0])));
    RankedList {
        query_id: qid.clone(),
        entries,
    }
}

/// Average precision of a ranked relevance pattern truncated at `k`,
/// normalized by `min(k, total_relevant)`; zero when nothing is relevant.
pub fn average_precision(relevant: &[bool], k: usize, total_relevant: usize) -> f64 {
    if total_relevant == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / k.min(total_relevant) as f64
}

/// Per-query average precision at `k`, in query order.
pub fn average_precisions(queries: &CodeBook, database: &CodeBook, k: usize) -> Result<Vec<f64>> {
    check_books(queries, database)?;
    ensure_arg!(k >= 1, "K must be at least 1");
    Ok((0..queries.len())
        .into_par_iter()
        .map(|q| {
            let list = rank_unchecked(queries, q, database);
            let label = queries.labels()[q];
            let relevant: Vec<bool> = list
                .entries
                .iter()
                .map(|&(i, _)| database.labels()[i] == label)
                .collect();
            let total = relevant.iter().filter(|&&r| r).count();
            average_precision(&relevant, k, total)
        })
        .collect())
}

/// Mean average precision over the top `k` Hamming-ranked results.
pub fn map_at_k(queries: &CodeBook, database: &CodeBook, k: usize) -> Result<f64> {
    let aps = average_precisions(queries, database, k)?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub radius: u32,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall of the retrieved set `{d : hamming ≤ radius}` for
/// radius 0..=K, micro-averaged over queries. An empty retrieved set counts
/// as precision 1; an empty relevant set as recall 1.
pub fn pr_curve(queries: &CodeBook, database: &CodeBook) -> Result<Vec<PrPoint>> {
    check_books(queries, database)?;
    let bits = queries.bits();
    let zero = || (vec![0u64; bits + 1], vec![0u64; bits + 1], 0u64);
    let (retrieved, hits, relevant) = (0..queries.len())
        .into_par_iter()
        .fold(zero, |(mut all, mut rel, mut total), q| {
            let qid = &queries.ids()[q];
            let label = queries.labels()[q];
            let qcode = queries.code_bytes(q);
            for i in 0..database.len() {
                if database.ids()[i] == *qid {
                    continue;
                }
                let d = hamming_packed(qcode, database.code_bytes(i), bits) as usize;
                all[d] += 1;
                if database.labels()[i] == label {
                    rel[d] += 1;
                    total += 1;
                }
            }
            (all, rel, total)
        })
        .reduce(zero, |(mut a1, mut r1, t1), (a2, r2, t2)| {
            for d in 0..=bits {
                a1[d] += a2[d];
                r1[d] += r2[d];
            }
            (a1, r1, t1 + t2)
        });
    let (mut got, mut hit) = (0u64, 0u64);
    Ok((0..=bits)
        .map(|d| {
            got += retrieved[d];
            hit += hits[d];
            PrPoint {
                radius: d as u32,
                precision: if got == 0 {
                    1.0
                } else {
                    hit as f64 / got as f64
                },
                recall: if relevant == 0 {
                    1.0
                } else {
                    hit as f64 / relevant as f64
                },
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub value: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Writes `metric,K,value` rows.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    write_rows(path.as_ref(), rows)
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    read_rows(path.as_ref())
}

/// Writes `radius,precision,recall` rows.
pub fn write_pr_csv(path: impl AsRef<Path>, curve: &[PrPoint]) -> Result<()> {
    write_rows(path.as_ref(), curve)
}

pub fn read_pr_csv(path: impl AsRef<Path>) -> Result<Vec<PrPoint>> {
    read_rows(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::Array2;
    use rand::Rng as _;

    fn book(ids: &[&str], labels: &[u32], codes: &[&[f64]]) -> CodeBook {
        let rows = codes.len();
        let bits = codes[0].len();
        let flat: Vec<f64> = codes.iter().flat_map(|c| c.iter().copied()).collect();
        CodeBook::from_signs(
            ids.iter().map(|s| s.to_string()).collect(),
            labels.to_vec(),
            Array2::from_shape_vec((rows, bits), flat).unwrap().view(),
        )
        .unwrap()
    }

    fn random_book(n: usize, bits: usize, classes: u32, seed: u64, prefix: &str) -> CodeBook {
        let mut rng = rng_for(seed, &[]);
        let codes =
            Array2::from_shape_fn((n, bits), |_| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let ids = (0..n).map(|i| format!("{prefix}{i:03}")).collect();
        CodeBook::from_signs(ids, labels, codes.view()).unwrap()
    }

    /// Direct evaluation: full sort by (distance, id), then the AP formula.
    fn oracle_map(q: &CodeBook, db: &CodeBook, k: usize) -> f64 {
        let mut total = 0.0;
        for i in 0..q.len() {
            let mut items = Vec::new();
            for j in 0..db.len() {
                if db.ids()[j] == q.ids()[i] {
                    continue;
                }
                let (a, b) = (q.code(i).to_signs(), db.code(j).to_signs());
                let d = a.iter().zip(&b).filter(|(x, y)| x != y).count();
                items.push((d, db.ids()[j].clone(), db.labels()[j] == q.labels()[i]));
            }
            items.sort();
            let r_q = items.iter().filter(|t| t.2).count();
            if r_q == 0 {
                continue;
            }
            let mut ap = 0.0;
            for r in 1..=k.min(items.len()) {
                if items[r - 1].2 {
                    let through = items[..r].iter().filter(|t| t.2).count();
                    ap += through as f64 / r as f64;
                }
            }
            total += ap / k.min(r_q) as f64;
        }
        total / q.len() as f64
    }

    #[test]
    fn ap_worked_example() {
        let ap = average_precision(&[true, false, true], 3, 2);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, true], 2, 5), 1.0);
        assert_eq!(average_precision(&[false, false], 2, 5), 0.0);
        assert_eq!(average_precision(&[false, false], 2, 0), 0.0);
    }

    #[test]
    fn ranking_orders_by_distance_then_id() {
        let db = book(
            &["c", "a", "b", "q"],
            &[0, 0, 1, 0],
            &[&[1.0, 1.0], &[1.0, 1.0], &[-1.0, 1.0], &[1.0, 1.0]],
        );
        let q = book(&["q"], &[0], &[&[1.0, 1.0]]);
        let list = rank(&q, 0, &db).unwrap();
        let ids: Vec<&str> = list
            .entries
            .iter()
            .map(|e| db.ids()[e.0].as_str())
            .collect();
        assert_eq!(ids, ["a", "c", "b"]);
        assert!(list.entries.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn map_matches_oracle_on_random_instances() {
        for seed in 0..40 {
            let n = 1 + (seed as usize * 7) % 100;
            let db = random_book(n, 8, 4, seed, "d");
            let q = random_book(1 + n / 3, 8, 4, seed + 1000, "q");
            for k in [1, 5, 20, 200] {
                let fast = map_at_k(&q, &db, k).unwrap();
                assert!((fast - oracle_map(&q, &db, k)).abs() <= 1e-12);
            }
            let own = map_at_k(&db, &db, 5).unwrap();
            assert!((own - oracle_map(&db, &db, 5)).abs() <= 1e-12);
        }
    }

    #[test]
    fn map_is_invariant_to_database_order() {
        let db = random_book(60, 6, 3, 9, "d");
        let q = random_book(20, 6, 3, 10, "q");
        let mut order: Vec<usize> = (0..db.len()).collect();
        order.reverse();
        order.rotate_left(17);
        let mut shuffled = CodeBook::new(db.bits());
        for &i in &order {
            let signs: Vec<f64> = db.code(i).to_signs().iter().map(|&v| v as f64).collect();
            shuffled
                .push(db.ids()[i].clone(), db.labels()[i], &signs)
                .unwrap();
        }
        assert_eq!(
            map_at_k(&q, &db, 10).unwrap(),
            map_at_k(&q, &shuffled, 10).unwrap()
        );
        assert_eq!(pr_curve(&q, &db).unwrap(), pr_curve(&q, &shuffled).unwrap());
    }

    #[test]
    fn pr_curve_hand_enumeration() {
        // Query 1111 (label 0). Distances: x=0 (label 0), y=2 (label 1), z=4 (label 0).
        let db = book(
            &["x", "y", "z"],
            &[0, 1, 0],
            &[&[1.0; 4], &[1.0, 1.0, -1.0, -1.0], &[-1.0; 4]],
        );
        let q = book(&["q"], &[0], &[&[1.0; 4]]);
        let c = pr_curve(&q, &db).unwrap();
        let expect = [
            (1.0, 0.5),
            (1.0, 0.5),
            (0.5, 0.5),
            (0.5, 0.5),
            (2.0 / 3.0, 1.0),
        ];
        for (p, (prec, rec)) in c.iter().zip(expect) {
            assert!((p.precision - prec).abs() < 1e-15 && (p.recall - rec).abs() < 1e-15);
        }
        assert!(c.windows(2).all(|w| w[0].recall <= w[1].recall));
    }

    #[test]
    fn pr_curve_edge_cases() {
        let db = random_book(30, 10, 1, 3, "d");
        let q = random_book(5, 10, 1, 4, "q");
        let c = pr_curve(&q, &db).unwrap();
        assert!(c.iter().all(|p| p.precision == 1.0));
        assert_eq!(c.last().unwrap().recall, 1.0);
        let multi = random_book(30, 10, 5, 5, "d");
        assert_eq!(pr_curve(&q, &multi).unwrap().last().unwrap().recall, 1.0);
        assert!(matches!(
            pr_curve(&q, &CodeBook::new(10)),
            Err(Error::Argument(_))
        ));
        assert!(map_at_k(&q, &CodeBook::new(10), 5).is_err());
        assert!(map_at_k(&q, &db, 0).is_err());
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        let rows = vec![MetricRow {
            metric: "map".into(),
            k: 5,
            value: 0.625,
        }];
        write_metrics_csv(&m, &rows).unwrap();
        assert_eq!(
            std::fs::read_to_string(&m).unwrap(),
            "metric,K,value\nmap,5,0.625\n"
        );
        assert_eq!(read_metrics_csv(&m).unwrap(), rows);
        let p = dir.path().join("pr.csv");
        let curve = pr_curve(&random_book(5, 4, 2, 1, "q"), &random_book(9, 4, 2, 2, "d")).unwrap();
        write_pr_csv(&p, &curve).unwrap();
        assert_eq!(read_pr_csv(&p).unwrap(), curve);
        std::fs::write(&p, "radius,precision,recall\n1,abc,0\n").unwrap();
        assert!(matches!(read_pr_csv(&p), Err(Error::Format { .. })));
    }
}
