//! Exact hard-margin linear SVM in two dimensions, and the four-point
//! example showing how a MixUp point shifts the decision boundary while its
//! nearest-neighbour projection does not.

use std::cmp::Ordering;
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Serialize, Serializer};

use crate::error::{ensure, Error, Result};

pub type Rational = BigRational;
pub type Point2 = [Rational; 2];

pub fn q(num: i64, den: i64) -> Rational {
    Rational::new(BigInt::from(num), BigInt::from(den))
}

pub fn point(x: (i64, i64), y: (i64, i64)) -> Point2 {
    [q(x.0, x.1), q(y.0, y.1)]
}

fn dot(a: &Point2, b: &Point2) -> Rational {
    &a[0] * &b[0] + &a[1] * &b[1]
}

fn ser_q<S: Serializer>(v: &Rational, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

fn ser_list<S: Serializer>(v: &[Rational], s: S) -> std::result::Result<S::Ok, S::Error> {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().serialize(s)
}

fn ser_pair<S: Serializer>(v: &Point2, s: S) -> std::result::Result<S::Ok, S::Error> {
    [v[0].to_string(), v[1].to_string()].serialize(s)
}

/// `{x : βᵀx + b = 0}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SeparatorLine {
    #[serde(serialize_with = "ser_pair")]
    pub beta: Point2,
    #[serde(serialize_with = "ser_q")]
    pub b: Rational,
}

impl SeparatorLine {
    pub fn new(beta: Point2, b: Rational) -> Result<Self> {
        ensure!(
            !(beta[0].is_zero() && beta[1].is_zero()),
            "separator normal must be non-zero"
        );
        Ok(Self { beta, b })
    }

    pub fn score(&self, x: &Point2) -> Rational {
        dot(&self.beta, x) + &self.b
    }

    pub fn norm_sq(&self) -> Rational {
        dot(&self.beta, &self.beta)
    }
}

impl std::fmt::Display for SeparatorLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "beta = ({}, {}), b = {}", self.beta[0], self.beta[1], self.b)
    }
}

/// Predicted label and whether the point lies exactly on the line (which
/// is labelled `+1`).
pub fn classify(line: &SeparatorLine, x: &Point2) -> (i8, bool) {
    let s = line.score(x);
    (if s.is_negative() { -1 } else { 1 }, s.is_zero())
}

/// Solves `a·x = rhs` exactly; `None` when `a` is singular.
fn solve(mut a: Vec<Vec<Rational>>, mut rhs: Vec<Rational>) -> Option<Vec<Rational>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = &a[r][col] / &a[col][col];
                for c in col..n {
                    let v = &f * &a[col][c];
                    a[r][c] -= v;
                }
                let v = &f * &rhs[col];
                rhs[r] -= v;
            }
        }
    }
    Some((0..n).map(|i| &rhs[i] / &a[i][i]).collect())
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// A KKT point found for one candidate support set.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub support: Vec<usize>,
    pub line: SeparatorLine,
}

/// Every KKT point reachable from a support set of two or three points:
/// the dual equalities are solved exactly and kept when the multipliers are
/// non-negative and every margin constraint holds.
pub fn kkt_candidates(points: &[Point2], labels: &[i8]) -> Vec<Candidate> {
    let y: Vec<Rational> = labels.iter().map(|&l| Rational::from_integer(BigInt::from(l))).collect();
    let mut out = Vec::new();
    for k in 2..=3.min(points.len()) {
        for s in subsets(points.len(), k) {
            // Unknowns: α_s (k of them), then b.
            let mut a = Vec::with_capacity(k + 1);
            let mut rhs = Vec::with_capacity(k + 1);
            for &j in &s {
                let mut row: Vec<Rational> = s
                    .iter()
                    .map(|&i| &y[j] * &y[i] * dot(&points[i], &points[j]))
                    .collect();
                row.push(y[j].clone());
                a.push(row);
                rhs.push(Rational::one());
            }
            let mut last: Vec<Rational> = s.iter().map(|&i| y[i].clone()).collect();
            last.push(Rational::zero());
            a.push(last);
            rhs.push(Rational::zero());
            let Some(sol) = solve(a, rhs) else { continue };
            if sol[..k].iter().any(|v| v.is_negative()) {
                continue;
            }
            let mut beta = [Rational::zero(), Rational::zero()];
            for (alpha, &i) in sol.iter().zip(&s) {
                for d in 0..2 {
                    beta[d] += alpha * &y[i] * &points[i][d];
                }
            }
            let Ok(line) = SeparatorLine::new(beta, sol[k].clone()) else { continue };
            let feasible = points
                .iter()
                .zip(&y)
                .all(|(p, yi)| yi * line.score(p) >= Rational::one());
            if feasible {
                out.push(Candidate { support: s, line });
            }
        }
    }
    out
}

/// Exact minimizer of `‖β‖²` subject to `yᵢ(βᵀxᵢ + b) ≥ 1`.
pub fn hard_margin_svm_2d(points: &[Point2], labels: &[i8]) -> Result<SeparatorLine> {
    ensure!(
        (2..=8).contains(&points.len()),
        "need between 2 and 8 points, got {}",
        points.len()
    );
    ensure!(points.len() == labels.len(), "points and labels differ in length");
    ensure!(labels.iter().all(|&l| l == 1 || l == -1), "labels must be +1 or -1");
    ensure!(
        labels.contains(&1) && labels.contains(&-1),
        "both labels must be present"
    );
    let cands = kkt_candidates(points, labels);
    let best = cands
        .into_iter()
        .min_by(|a, b| a.line.norm_sq().cmp(&b.line.norm_sq()))
        .ok_or_else(|| Error::Infeasible("points are not linearly separable".into()))?;
    Ok(best.line)
}

fn dist_sq(a: &Point2, b: &Point2) -> Rational {
    let dx = &a[0] - &b[0];
    let dy = &a[1] - &b[1];
    &dx * &dx + &dy * &dy
}

/// Index of the Euclidean nearest point (lowest index on ties).
pub fn euclidean_nearest(x: &Point2, candidates: &[Point2]) -> usize {
    let mut best = 0;
    for i in 1..candidates.len() {
        if dist_sq(x, &candidates[i]) < dist_sq(x, &candidates[best]) {
            best = i;
        }
    }
    best
}

/// Compares the cosine similarity of `x` with `a` and with `b` exactly, by
/// comparing `sign(x·v)·(x·v)²/‖v‖²`.
fn cmp_cosine(x: &Point2, a: &Point2, b: &Point2) -> Ordering {
    let key = |v: &Point2| {
        let d = dot(x, v);
        let mag = &d * &d / dot(v, v);
        if d.is_negative() {
            -mag
        } else {
            mag
        }
    };
    key(a).cmp(&key(b))
}

/// Index of the highest-cosine point (lowest index on ties).
pub fn cosine_nearest(x: &Point2, candidates: &[Point2]) -> usize {
    let mut best = 0;
    for i in 1..candidates.len() {
        if cmp_cosine(x, &candidates[i], &candidates[best]) == Ordering::Greater {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize)]
pub struct PointRow {
    pub name: String,
    #[serde(serialize_with = "ser_pair")]
    pub x: Point2,
    pub label: i8,
    pub predicted: i8,
    pub on_boundary: bool,
    #[serde(serialize_with = "ser_q")]
    pub score: Rational,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeparatorReport {
    pub trained_on: Vec<String>,
    pub separator: SeparatorLine,
    pub table: Vec<PointRow>,
    pub misclassified: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NeighbourReport {
    pub metric: String,
    pub nearest: String,
    pub trained: SeparatorReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundaryDemo {
    pub points: Vec<PointRow>,
    pub ground_truth: SeparatorReport,
    #[serde(serialize_with = "ser_q")]
    pub lambda: Rational,
    #[serde(serialize_with = "ser_pair")]
    pub x_mixup: Point2,
    pub y_mixup: i8,
    #[serde(serialize_with = "ser_list")]
    pub squared_distances: Vec<Rational>,
    pub mixup: SeparatorReport,
    /// Projection as drawn in the example: `x_mixup ↦ x2`, label `y2`.
    pub projection: SeparatorReport,
    pub euclidean_neighbour: NeighbourReport,
    pub cosine_neighbour: NeighbourReport,
    pub notes: Vec<String>,
}

fn names(idx: &[usize]) -> Vec<String> {
    idx.iter().map(|i| format!("x{}", i + 1)).collect()
}

fn report(train: Vec<String>, line: SeparatorLine, pts: &[Point2], labels: &[i8]) -> SeparatorReport {
    let table: Vec<PointRow> = pts
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (x, &label))| {
            let (predicted, on_boundary) = classify(&line, x);
            PointRow {
                name: format!("x{}", i + 1),
                x: x.clone(),
                label,
                predicted,
                on_boundary,
                score: line.score(x),
            }
        })
        .collect();
    let misclassified = table
        .iter()
        .filter(|r| r.predicted != r.label)
        .map(|r| r.name.clone())
        .collect();
    SeparatorReport {
        trained_on: train,
        separator: line,
        table,
        misclassified,
    }
}

/// The four-point example: data, the ground-truth separator, the MixUp
/// point and its separator, and separators trained on projected points.
pub fn run_boundary_demo() -> Result<BoundaryDemo> {
    let pts: Vec<Point2> = vec![
        point((5, 2), (2, 1)),
        point((2, 1), (-2, 1)),
        point((-5, 2), (-2, 1)),
        point((-2, 1), (2, 1)),
    ];
    let labels = [1i8, 1, -1, -1];
    let truth = hard_margin_svm_2d(&pts, &labels)?;
    let lambda = q(13, 25);
    let one_minus = Rational::one() - &lambda;
    let x_mix: Point2 = [
        &lambda * &pts[2][0] + &one_minus * &pts[0][0],
        &lambda * &pts[2][1] + &one_minus * &pts[0][1],
    ];
    let (y_mix, _) = classify(&truth, &x_mix);

    let train_with = |extra: Point2, y: i8, extra_name: &str| -> Result<SeparatorReport> {
        let set = vec![pts[0].clone(), pts[2].clone(), extra];
        let line = hard_margin_svm_2d(&set, &[labels[0], labels[2], y])?;
        let mut train = names(&[0, 2]);
        train.push(extra_name.to_string());
        Ok(report(train, line, &pts, &labels))
    };

    let mixup = train_with(x_mix.clone(), y_mix, "x_mixup")?;
    let projection = train_with(pts[1].clone(), labels[1], "x2")?;
    let e = euclidean_nearest(&x_mix, &pts);
    let c = cosine_nearest(&x_mix, &pts);
    let euclid = NeighbourReport {
        metric: "euclidean".into(),
        nearest: format!("x{}", e + 1),
        trained: train_with(pts[e].clone(), labels[e], &format!("x{}", e + 1))?,
    };
    let cosine = NeighbourReport {
        metric: "cosine".into(),
        nearest: format!("x{}", c + 1),
        trained: train_with(pts[c].clone(), labels[c], &format!("x{}", c + 1))?,
    };

    let mut notes = Vec::new();
    if e != 1 {
        notes.push(format!(
            "the Euclidean nearest neighbour of x_mixup is x{} (squared distance {}), not x2 (squared distance {}); the projection separator uses x2 as in the example",
            e + 1,
            dist_sq(&x_mix, &pts[e]),
            dist_sq(&x_mix, &pts[1])
        ));
    }
    notes.push(
        "the MixUp separator is trained on {x1, x3, x_mixup}; the published MixUp solution does not satisfy the constraints for {x2, x4, x_mixup}".into(),
    );
    if !mixup.misclassified.iter().any(|n| n == "x3") {
        notes.push(format!(
            "the MixUp separator classifies x3 correctly; it misclassifies {}",
            if mixup.misclassified.is_empty() {
                "nothing".to_string()
            } else {
                mixup.misclassified.join(", ")
            }
        ));
    }

    let points = report(vec![], truth.clone(), &pts, &labels).table;
    Ok(BoundaryDemo {
        points,
        ground_truth: report(names(&[0, 1, 2, 3]), truth, &pts, &labels),
        lambda,
        squared_distances: pts.iter().map(|p| dist_sq(&x_mix, p)).collect(),
        x_mixup: x_mix,
        y_mixup: y_mix,
        mixup,
        projection,
        euclidean_neighbour: euclid,
        cosine_neighbour: cosine,
        notes,
    })
}

impl BoundaryDemo {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let sep = |s: &mut String, title: &str, r: &SeparatorReport| {
            let _ = writeln!(s, "{title}: trained on {{{}}}", r.trained_on.join(", "));
            let _ = writeln!(s, "  {}", r.separator);
            for row in &r.table {
                let _ = writeln!(
                    s,
                    "  {:<3} ({}, {})  y = {:+}  predicted {:+}  score {}{}",
                    row.name,
                    row.x[0],
                    row.x[1],
                    row.label,
                    row.predicted,
                    row.score,
                    if row.on_boundary { "  (on boundary)" } else { "" }
                );
            }
            let _ = writeln!(
                s,
                "  misclassified: {}",
                if r.misclassified.is_empty() {
                    "none".to_string()
                } else {
                    r.misclassified.join(", ")
                }
            );
        };
        sep(&mut s, "ground truth", &self.ground_truth);
        let _ = writeln!(
            s,
            "x_mixup = {}·x3 + {}·x1 = ({}, {}), teacher label {:+}",
            self.lambda,
            Rational::one() - &self.lambda,
            self.x_mixup[0],
            self.x_mixup[1],
            self.y_mixup
        );
        let d: Vec<String> = self.squared_distances.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "squared distances to x1..x4: {}", d.join(", "));
        sep(&mut s, "mixup", &self.mixup);
        sep(&mut s, "projection (x_mixup -> x2)", &self.projection);
        for n in [&self.euclidean_neighbour, &self.cosine_neighbour] {
            sep(&mut s, &format!("{} nearest neighbour ({})", n.metric, n.nearest), &n.trained);
        }
        for note in &self.notes {
            let _ = writeln!(s, "note: {note}");
        }
        s
    }
}
