//! Principal components of GWR node weights by power iteration with
//! deflation, and the projection file.
//!
//! Projection file header: `node_id,pc1,pc2,dominant_task`. The task column
//! holds 1, 2 or 3, or is empty for a node that is no demonstration's best
//! match.

use std::collections::BTreeMap;
use std::path::Path;

use crate::env::Task;
use crate::error::{Error, Result};
use crate::gwr::{GwrNetwork, NodeId};

pub const PROJECTION_HEADER: [&str; 4] = ["node_id", "pc1", "pc2", "dominant_task"];

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
const MAX_ITERATIONS: usize = 200_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit vectors, largest eigenvalue first. The entry of largest magnitude
    /// in each vector is positive.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn fix_sign(v: &mut [f64]) {
    let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Population covariance of the rows.
pub fn covariance(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let first = rows.first().ok_or_else(|| Error::Precondition("no rows to analyse".into()))?;
    let d = first.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Precondition("rows must share a positive width".into()));
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in i..d {
                cov[i][j] += di * (r[j] - mean[j]) / n;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    Ok((mean, cov))
}

/// Dominant eigenpair of a symmetric positive semi-definite matrix. Starts
/// from the column with the largest diagonal entry, which lies in the range of
/// the matrix.
fn power_iteration(m: &[Vec<f64>], tol: f64) -> (f64, Vec<f64>) {
    let d = m.len();
    let start = (0..d).fold(0, |b, i| if m[i][i] > m[b][b] { i } else { b });
    let mut v: Vec<f64> = (0..d).map(|i| m[i][start]).collect();
    if normalize(&mut v) == 0.0 {
        let mut e = vec![0.0; d];
        e[start] = 1.0;
        return (0.0, e);
    }
    for _ in 0..MAX_ITERATIONS {
        let mut next: Vec<f64> = m.iter().map(|row| dot(row, &v)).collect();
        if normalize(&mut next) == 0.0 {
            return (0.0, v);
        }
        let delta = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < tol {
            break;
        }
    }
    let mv: Vec<f64> = m.iter().map(|row| dot(row, &v)).collect();
    (dot(&v, &mv), v)
}

impl Pca {
    pub fn fit(rows: &[Vec<f64>], components: usize, tol: f64) -> Result<Self> {
        let (mean, mut cov) = covariance(rows)?;
        let d = mean.len();
        if components == 0 || components > d {
            return Err(Error::Precondition(format!("cannot extract {components} components from width {d}")));
        }
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(components);
        let mut values = Vec::with_capacity(components);
        for _ in 0..components {
            let (lambda, mut v) = power_iteration(&cov, tol);
            // keep later vectors orthogonal when the remaining spectrum is flat
            for u in &vectors {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
            if normalize(&mut v) == 0.0 {
                v = (0..d)
                    .map(|i| f64::from(u8::from(i == vectors.len())))
                    .collect();
            }
            fix_sign(&mut v);
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] -= lambda * v[i] * v[j];
                }
            }
            vectors.push(v);
            values.push(lambda.max(0.0));
        }
        Ok(Pca {
            mean,
            components: vectors,
            eigenvalues: values,
        })
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.components.iter().map(|c| dot(c, &centred)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionRow {
    pub node: NodeId,
    pub pc1: f64,
    pub pc2: f64,
    pub dominant_task: Option<Task>,
}

/// Projects every node weight onto the top two components.
pub fn project_network(gwr: &GwrNetwork, labels: &BTreeMap<NodeId, Task>) -> Result<Vec<ProjectionRow>> {
    let weights: Vec<Vec<f64>> = gwr.nodes().iter().map(|n| n.weight.clone()).collect();
    let pca = Pca::fit(&weights, 2, DEFAULT_TOLERANCE)?;
    Ok(gwr
        .nodes()
        .iter()
        .map(|n| {
            let p = pca.project(&n.weight);
            ProjectionRow {
                node: n.id,
                pc1: p[0],
                pc2: p[1],
                dominant_task: labels.get(&n.id).copied(),
            }
        })
        .collect())
}

pub fn write_projection(path: &Path, rows: &[ProjectionRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PROJECTION_HEADER)?;
    for r in rows {
        let task = r.dominant_task.map(|t| t.id().to_string()).unwrap_or_default();
        w.write_record([r.node.to_string(), r.pc1.to_string(), r.pc2.to_string(), task])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_projection(path: &Path) -> Result<Vec<ProjectionRow>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(PROJECTION_HEADER) {
        return Err(Error::format(path, "unexpected projection header"));
    }
    let bad = || Error::format(path, "malformed projection row");
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let task = match &rec[3] {
            "" => None,
            s => Some(Task::from_id(s.parse().map_err(|_| bad())?).map_err(|_| bad())?),
        };
        out.push(ProjectionRow {
            node: rec[0].parse().map_err(|_| bad())?,
            pc1: rec[1].parse().map_err(|_| bad())?,
            pc2: rec[2].parse().map_err(|_| bad())?,
            dominant_task: task,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    /// Cyclic Jacobi rotations; an independent route to the full spectrum.
    fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = a.len();
        let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        for _ in 0..100 {
            let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..d {
                for q in p + 1..d {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..d {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let (vp, vq) = (row[p], row[q]);
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        let values = (0..d).map(|i| a[i][i]).collect();
        let vectors = (0..d).map(|j| (0..d).map(|i| v[i][j]).collect()).collect();
        (values, vectors)
    }

    fn parallel(a: &[f64], b: &[f64]) -> f64 {
        1.0 - dot(a, b).abs() / (dot(a, a) * dot(b, b)).sqrt()
    }

    #[test]
    fn first_coordinate_variation_gives_e1() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.3 - 2.0, 0.5, -1.0, 0.25]).collect();
        let pca = Pca::fit(&rows, 2, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(pca.components[0], vec![1.0, 0.0, 0.0, 0.0]);
        assert!(pca.eigenvalues[1].abs() < 1e-12);
        assert!(dot(&pca.components[0], &pca.components[1]).abs() < 1e-12);
    }

    #[test]
    fn single_direction_slice() {
        let mut rng = seeded(3, 0);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let t: f64 = rng.random_range(-1.0..1.0);
                vec![0.1 + 0.6 * t, -0.3 + 0.8 * t, 0.7]
            })
            .collect();
        let pca = Pca::fit(&rows, 2, DEFAULT_TOLERANCE).unwrap();
        let c = &pca.components[0];
        assert!((c[0] - 0.6).abs() < 1e-9 && (c[1] - 0.8).abs() < 1e-9 && c[2].abs() < 1e-9, "{c:?}");
    }

    #[test]
    fn matches_jacobi_spectrum_and_orders_variance() {
        let mut rng = seeded(4, 0);
        let scales = [3.0, 2.0, 1.0, 0.5, 0.2, 0.1];
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                let base: Vec<f64> = scales.iter().map(|s| s * rng.random_range(-1.0..1.0f64)).collect();
                // mix coordinates so the axes are not the eigenvectors
                (0..6).map(|i| (0..6).map(|j| base[j] * ((i * 7 + j * 3) % 5) as f64 / 4.0 + if i == j { base[j] } else { 0.0 }).sum()).collect()
            })
            .collect();
        let pca = Pca::fit(&rows, 3, DEFAULT_TOLERANCE).unwrap();
        let (_, cov) = covariance(&rows).unwrap();
        let (values, vectors) = jacobi_eigen(cov);
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
        for k in 0..3 {
            let want = values[order[k]];
            assert!((pca.eigenvalues[k] - want).abs() < 1e-8 * want, "eigenvalue {k}: {} vs {want}", pca.eigenvalues[k]);
            assert!(parallel(&pca.components[k], &vectors[order[k]]) < 1e-8, "component {k}");
        }
        let var = |k: usize| {
            let p: Vec<f64> = rows.iter().map(|r| pca.project(r)[k]).collect();
            p.iter().map(|x| x * x).sum::<f64>() / p.len() as f64
        };
        assert!(var(0) >= var(1) && var(1) >= var(2));
        assert!((var(0) - pca.eigenvalues[0]).abs() < 1e-8 * pca.eigenvalues[0]);
    }

    #[test]
    fn deterministic_and_rejects_bad_input() {
        let mut rng = seeded(5, 0);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        assert_eq!(Pca::fit(&rows, 2, DEFAULT_TOLERANCE).unwrap(), Pca::fit(&rows, 2, DEFAULT_TOLERANCE).unwrap());
        assert!(Pca::fit(&[], 2, DEFAULT_TOLERANCE).is_err());
        assert!(Pca::fit(&rows, 5, DEFAULT_TOLERANCE).is_err());
        assert!(Pca::fit(&[vec![1.0, 2.0], vec![1.0]], 1, DEFAULT_TOLERANCE).is_err());
    }

    #[test]
    fn projection_file_round_trip() {
        let mut rng = seeded(6, 0);
        let gwr = GwrNetwork::new(Default::default(), &[0.0; 4], &[1.0; 4], &mut rng).unwrap();
        let mut labels = BTreeMap::new();
        labels.insert(gwr.nodes()[0].id, Task::PushToWhite);
        let rows = project_network(&gwr, &labels).unwrap();
        assert_eq!(rows.len(), gwr.node_count());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.csv");
        write_projection(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "node_id,pc1,pc2,dominant_task");
        assert!(text.lines().nth(2).unwrap().ends_with(','));
        assert_eq!(read_projection(&path).unwrap(), rows);
        assert!(matches!(read_projection(&dir.path().join("none.csv")), Err(Error::MissingArtifact(_))));
    }
}
