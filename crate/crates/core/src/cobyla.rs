//! Constrained optimization by linear approximations (Powell, 1994).
//!
//! A port of the reference `cobylb`/`trstlp` routines. The solver keeps a
//! simplex of `n + 1` points, interpolates the objective and constraints
//! linearly on it, and takes trust-region steps judged by the merit function
//! `f + mu * max_violation`. Constraints follow the convention `g(x) >= 0`.
//!
//! The internal matrices use 1-based indices so the code lines up with the
//! reference implementation.

use std::ops::{Index, IndexMut};

const ALPHA: f64 = 0.25;
const BETA: f64 = 2.1;
const GAMMA: f64 = 0.5;
const DELTA: f64 = 1.1;
const SIMI_TOLERANCE: f64 = 0.1;

pub type Callable<'a> = Box<dyn Fn(&[f64]) -> f64 + Send + Sync + 'a>;

pub struct OptProblem<'a> {
    pub objective: Callable<'a>,
    pub constraints: Vec<Callable<'a>>,
    pub x0: Vec<f64>,
    pub rho_begin: f64,
    pub rho_end: f64,
    pub max_evals: usize,
}

impl<'a> OptProblem<'a> {
    /// Problem with the default radii (0.25 to 1e-6) and a budget of
    /// `2000 * n` evaluations.
    pub fn new(x0: Vec<f64>, objective: impl Fn(&[f64]) -> f64 + Send + Sync + 'a) -> Self {
        let n = x0.len();
        OptProblem {
            objective: Box::new(objective),
            constraints: Vec::new(),
            x0,
            rho_begin: 0.25,
            rho_end: 1e-6,
            max_evals: 2000 * n.max(1),
        }
    }

    pub fn constraint(mut self, g: impl Fn(&[f64]) -> f64 + Send + Sync + 'a) -> Self {
        self.constraints.push(Box::new(g));
        self
    }

    pub fn rho(mut self, begin: f64, end: f64) -> Self {
        self.rho_begin = begin;
        self.rho_end = end;
        self
    }

    pub fn max_evals(mut self, max_evals: usize) -> Self {
        self.max_evals = max_evals;
        self
    }

    pub fn dimension(&self) -> usize {
        self.x0.len()
    }

    fn max_violation(&self, x: &[f64]) -> f64 {
        self.constraints.iter().fold(0.0, |acc, g| acc.max(-g(x)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptStatus {
    Converged,
    MaxEvals,
    DegenerateSimplex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptResult {
    pub x_best: Vec<f64>,
    pub f_best: f64,
    pub max_violation: f64,
    pub status: OptStatus,
    pub n_evals: usize,
}

/// Merit of the simplex pole each time it is identified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoleRecord {
    pub f: f64,
    pub violation: f64,
    pub parmu: f64,
}

/// True iff every constraint satisfies `g(x) >= -tol`.
pub fn check_feasible(problem: &OptProblem<'_>, x: &[f64], tol: f64) -> bool {
    problem.constraints.iter().all(|g| g(x) >= -tol)
}

pub fn minimize(problem: &OptProblem<'_>) -> OptResult {
    run(problem, None)
}

pub fn minimize_traced(problem: &OptProblem<'_>) -> (OptResult, Vec<PoleRecord>) {
    let mut trace = Vec::new();
    let result = run(problem, Some(&mut trace));
    (result, trace)
}

/// Column-major matrix addressed with 1-based `(row, col)`.
#[derive(Clone)]
struct Mat {
    rows: usize,
    data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, data: vec![0.0; rows * cols] }
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[(j - 1) * self.rows + (i - 1)]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[(j - 1) * self.rows + (i - 1)]
    }
}

struct Evaluated {
    x: Vec<f64>,
    f: f64,
    violation: f64,
}

#[derive(Clone, Copy)]
enum Next {
    Evaluate,
    Pole,
    AfterTrial,
    ReduceRho,
}

fn run(problem: &OptProblem<'_>, mut trace: Option<&mut Vec<PoleRecord>>) -> OptResult {
    let n = problem.dimension();
    let m = problem.constraints.len();
    assert!(n >= 1, "at least one variable");
    assert!(problem.x0.iter().all(|v| v.is_finite()), "x0 must be finite");
    assert!(
        problem.rho_begin > problem.rho_end && problem.rho_end > 0.0,
        "need rho_begin > rho_end > 0"
    );
    let maxfun = problem.max_evals;
    let (mp, mpp, np) = (m + 1, m + 2, n + 1);

    let mut x = vec![0.0; n + 1];
    x[1..].copy_from_slice(&problem.x0);
    let mut con = vec![0.0; mpp + 1];
    let mut sim = Mat::zeros(n, np);
    let mut simi = Mat::zeros(n, n);
    let mut datmat = Mat::zeros(mpp, np);
    let mut a = Mat::zeros(n, mp);
    let mut vsig = vec![0.0; n + 1];
    let mut veta = vec![0.0; n + 1];
    let mut sigbar = vec![0.0; n + 1];
    let mut dx = vec![0.0; n + 1];

    let mut rho = problem.rho_begin;
    let rhoend = problem.rho_end;
    let mut parmu = 0.0f64;
    let mut nfvals = 0usize;
    for i in 1..=n {
        sim[(i, np)] = x[i];
        sim[(i, i)] = rho;
        simi[(i, i)] = 1.0 / rho;
    }
    let mut jdrop = np;
    let mut ibrnch = false;
    let mut iflag = false;
    let mut ifull;
    let (mut parsig, mut prerec, mut prerem) = (0.0, 0.0, 0.0);
    let mut f;
    let mut resmax;
    let mut failed_repairs = 0;
    let mut history: Vec<Evaluated> = Vec::new();
    let status;
    let mut next = Next::Evaluate;

    loop {
        match next {
            Next::Evaluate => {
                if nfvals >= maxfun && nfvals > 0 {
                    status = OptStatus::MaxEvals;
                    break;
                }
                nfvals += 1;
                let xs = &x[1..];
                f = (problem.objective)(xs);
                resmax = 0.0f64;
                let mut finite = f.is_finite();
                for (k, g) in problem.constraints.iter().enumerate() {
                    let v = g(xs);
                    finite &= v.is_finite();
                    con[k + 1] = v;
                    resmax = resmax.max(-v);
                }
                if !finite {
                    status = OptStatus::DegenerateSimplex;
                    break;
                }
                con[mp] = f;
                con[mpp] = resmax;
                history.push(Evaluated { x: xs.to_vec(), f, violation: resmax });
                if ibrnch {
                    next = Next::AfterTrial;
                    continue;
                }
                for k in 1..=mpp {
                    datmat[(k, jdrop)] = con[k];
                }
                if nfvals <= np {
                    // exchange the new vertex of the initial simplex with the
                    // optimal one if necessary, then pick the next vertex
                    if jdrop <= n {
                        if datmat[(mp, np)] <= f {
                            x[jdrop] = sim[(jdrop, np)];
                        } else {
                            sim[(jdrop, np)] = x[jdrop];
                            for k in 1..=mpp {
                                datmat[(k, jdrop)] = datmat[(k, np)];
                                datmat[(k, np)] = con[k];
                            }
                            for k in 1..=jdrop {
                                sim[(jdrop, k)] = -rho;
                                let mut temp = 0.0;
                                for i in k..=jdrop {
                                    temp -= simi[(i, k)];
                                }
                                simi[(jdrop, k)] = temp;
                            }
                        }
                    }
                    if nfvals <= n {
                        jdrop = nfvals;
                        x[jdrop] += rho;
                        continue;
                    }
                }
                ibrnch = true;
                next = Next::Pole;
            }

            Next::Pole => {
                // identify the optimal vertex and move it into pole position
                let mut phimin = datmat[(mp, np)] + parmu * datmat[(mpp, np)];
                let mut nbest = np;
                for j in 1..=n {
                    let temp = datmat[(mp, j)] + parmu * datmat[(mpp, j)];
                    if temp < phimin {
                        nbest = j;
                        phimin = temp;
                    } else if temp == phimin && parmu == 0.0 && datmat[(mpp, j)] < datmat[(mpp, nbest)] {
                        nbest = j;
                    }
                }
                if nbest <= n {
                    for i in 1..=mpp {
                        let temp = datmat[(i, np)];
                        datmat[(i, np)] = datmat[(i, nbest)];
                        datmat[(i, nbest)] = temp;
                    }
                    for i in 1..=n {
                        let temp = sim[(i, nbest)];
                        sim[(i, nbest)] = 0.0;
                        sim[(i, np)] += temp;
                        let mut tempa = 0.0;
                        for k in 1..=n {
                            sim[(i, k)] -= temp;
                            tempa -= simi[(k, i)];
                        }
                        simi[(nbest, i)] = tempa;
                    }
                }
                if let Some(t) = trace.as_deref_mut() {
                    t.push(PoleRecord { f: datmat[(mp, np)], violation: datmat[(mpp, np)], parmu });
                }

                if inverse_error(&sim, &simi, n) > SIMI_TOLERANCE {
                    let repaired = invert(&sim, n).map(|inv| {
                        simi = inv;
                        inverse_error(&sim, &simi, n) <= SIMI_TOLERANCE
                    });
                    if repaired != Some(true) {
                        failed_repairs += 1;
                        if failed_repairs >= 2 {
                            status = OptStatus::DegenerateSimplex;
                            break;
                        }
                        // rebuild the worst-conditioned vertex along the
                        // direction most orthogonal to the others
                        let (j, dir) = worst_vertex(&sim, n);
                        for i in 1..=n {
                            dx[i] = rho * dir[i - 1];
                            sim[(i, j)] = dx[i];
                            x[i] = sim[(i, np)] + dx[i];
                        }
                        match invert(&sim, n) {
                            Some(inv) => simi = inv,
                            None => {
                                status = OptStatus::DegenerateSimplex;
                                break;
                            }
                        }
                        jdrop = j;
                        ibrnch = false;
                        next = Next::Evaluate;
                        continue;
                    }
                }
                failed_repairs = 0;

                // linear approximations; minus the objective gradient goes
                // after the constraint gradients
                let mut w = vec![0.0; n + 1];
                for k in 1..=mp {
                    con[k] = -datmat[(k, np)];
                    for j in 1..=n {
                        w[j] = datmat[(k, j)] + con[k];
                    }
                    for i in 1..=n {
                        let mut temp = 0.0;
                        for j in 1..=n {
                            temp += w[j] * simi[(j, i)];
                        }
                        if k == mp {
                            temp = -temp;
                        }
                        a[(i, k)] = temp;
                    }
                }

                iflag = true;
                parsig = ALPHA * rho;
                let pareta = BETA * rho;
                for j in 1..=n {
                    let mut wsig = 0.0;
                    let mut weta = 0.0;
                    for i in 1..=n {
                        wsig += simi[(j, i)] * simi[(j, i)];
                        weta += sim[(i, j)] * sim[(i, j)];
                    }
                    vsig[j] = 1.0 / wsig.sqrt();
                    veta[j] = weta.sqrt();
                    if vsig[j] < parsig || veta[j] > pareta {
                        iflag = false;
                    }
                }

                if !ibrnch && !iflag {
                    // geometry step: replace the vertex that spoils acceptability
                    jdrop = 0;
                    let mut temp = pareta;
                    for j in 1..=n {
                        if veta[j] > temp {
                            jdrop = j;
                            temp = veta[j];
                        }
                    }
                    if jdrop == 0 {
                        for j in 1..=n {
                            if vsig[j] < temp {
                                jdrop = j;
                                temp = vsig[j];
                            }
                        }
                    }
                    let temp = GAMMA * rho * vsig[jdrop];
                    for i in 1..=n {
                        dx[i] = temp * simi[(jdrop, i)];
                    }
                    let mut cvmaxp = 0.0f64;
                    let mut cvmaxm = 0.0f64;
                    let mut sum = 0.0;
                    for k in 1..=mp {
                        sum = 0.0;
                        for i in 1..=n {
                            sum += a[(i, k)] * dx[i];
                        }
                        if k < mp {
                            let temp = datmat[(k, np)];
                            cvmaxp = cvmaxp.max(-sum - temp);
                            cvmaxm = cvmaxm.max(sum - temp);
                        }
                    }
                    let dxsign = if parmu * (cvmaxp - cvmaxm) > sum + sum { -1.0 } else { 1.0 };
                    let mut temp = 0.0;
                    for i in 1..=n {
                        dx[i] *= dxsign;
                        sim[(i, jdrop)] = dx[i];
                        temp += simi[(jdrop, i)] * dx[i];
                    }
                    for i in 1..=n {
                        simi[(jdrop, i)] /= temp;
                    }
                    for j in 1..=n {
                        if j != jdrop {
                            let mut temp = 0.0;
                            for i in 1..=n {
                                temp += simi[(j, i)] * dx[i];
                            }
                            for i in 1..=n {
                                simi[(j, i)] -= temp * simi[(jdrop, i)];
                            }
                        }
                        x[j] = sim[(j, np)] + dx[j];
                    }
                    next = Next::Evaluate;
                    continue;
                }

                ifull = trstlp(n, m, &a, &con, rho, &mut dx);
                if !ifull {
                    let len2: f64 = dx[1..].iter().map(|v| v * v).sum();
                    if len2 < 0.25 * rho * rho {
                        ibrnch = true;
                        next = Next::ReduceRho;
                        continue;
                    }
                }

                // predicted change to f and the new maximum violation
                let mut resnew = 0.0f64;
                con[mp] = 0.0;
                let mut sum = 0.0;
                for k in 1..=mp {
                    sum = con[k];
                    for i in 1..=n {
                        sum -= a[(i, k)] * dx[i];
                    }
                    if k < mp {
                        resnew = resnew.max(sum);
                    }
                }

                let mut barmu = 0.0;
                prerec = datmat[(mpp, np)] - resnew;
                if prerec > 0.0 {
                    barmu = sum / prerec;
                }
                if parmu < 1.5 * barmu {
                    parmu = 2.0 * barmu;
                    let phi = datmat[(mp, np)] + parmu * datmat[(mpp, np)];
                    let pole_changes = (1..=n).any(|j| {
                        let temp = datmat[(mp, j)] + parmu * datmat[(mpp, j)];
                        temp < phi || (temp == phi && parmu == 0.0 && datmat[(mpp, j)] < datmat[(mpp, np)])
                    });
                    if pole_changes {
                        continue;
                    }
                }
                prerem = parmu * prerec - sum;

                for i in 1..=n {
                    x[i] = sim[(i, np)] + dx[i];
                }
                ibrnch = true;
                next = Next::Evaluate;
            }

            Next::AfterTrial => {
                let f = con[mp];
                let resmax = con[mpp];
                let vmold = datmat[(mp, np)] + parmu * datmat[(mpp, np)];
                let vmnew = f + parmu * resmax;
                let mut trured = vmold - vmnew;
                if parmu == 0.0 && f == datmat[(mp, np)] {
                    prerem = prerec;
                    trured = datmat[(mpp, np)] - resmax;
                }

                // choose the vertex that x(*) replaces; mandatory if trured > 0
                let mut ratio = if trured <= 0.0 { 1.0 } else { 0.0 };
                jdrop = 0;
                for j in 1..=n {
                    let mut temp = 0.0;
                    for i in 1..=n {
                        temp += simi[(j, i)] * dx[i];
                    }
                    let temp = temp.abs();
                    if temp > ratio {
                        jdrop = j;
                        ratio = temp;
                    }
                    sigbar[j] = temp * vsig[j];
                }

                let mut edgmax = DELTA * rho;
                let mut l = 0;
                for j in 1..=n {
                    if sigbar[j] >= parsig || sigbar[j] >= vsig[j] {
                        let mut temp = veta[j];
                        if trured > 0.0 {
                            temp = 0.0;
                            for i in 1..=n {
                                temp += (dx[i] - sim[(i, j)]).powi(2);
                            }
                            temp = temp.sqrt();
                        }
                        if temp > edgmax {
                            l = j;
                            edgmax = temp;
                        }
                    }
                }
                if l > 0 {
                    jdrop = l;
                }
                if jdrop == 0 {
                    next = Next::ReduceRho;
                    continue;
                }

                let mut temp = 0.0;
                for i in 1..=n {
                    sim[(i, jdrop)] = dx[i];
                    temp += simi[(jdrop, i)] * dx[i];
                }
                for i in 1..=n {
                    simi[(jdrop, i)] /= temp;
                }
                for j in 1..=n {
                    if j != jdrop {
                        let mut temp = 0.0;
                        for i in 1..=n {
                            temp += simi[(j, i)] * dx[i];
                        }
                        for i in 1..=n {
                            simi[(j, i)] -= temp * simi[(jdrop, i)];
                        }
                    }
                }
                for k in 1..=mpp {
                    datmat[(k, jdrop)] = con[k];
                }

                next = if trured > 0.0 && trured >= 0.1 * prerem { Next::Pole } else { Next::ReduceRho };
            }

            Next::ReduceRho => {
                if !iflag {
                    ibrnch = false;
                    next = Next::Pole;
                    continue;
                }
                if rho > rhoend {
                    rho *= 0.5;
                    if rho <= 1.5 * rhoend {
                        rho = rhoend;
                    }
                    if parmu > 0.0 {
                        let mut denom = 0.0f64;
                        let (mut cmin, mut cmax) = (0.0f64, 0.0f64);
                        for k in 1..=mp {
                            cmin = datmat[(k, np)];
                            cmax = cmin;
                            for i in 1..=n {
                                cmin = cmin.min(datmat[(k, i)]);
                                cmax = cmax.max(datmat[(k, i)]);
                            }
                            if k <= m && cmin < 0.5 * cmax {
                                let temp = cmax.max(0.0) - cmin;
                                denom = if denom <= 0.0 { temp } else { denom.min(temp) };
                            }
                        }
                        if denom == 0.0 {
                            parmu = 0.0;
                        } else if cmax - cmin < parmu * denom {
                            parmu = (cmax - cmin) / denom;
                        }
                    }
                    next = Next::Pole;
                    continue;
                }
                status = OptStatus::Converged;
                break;
            }
        }
    }

    let pole_violation = if history.is_empty() { f64::INFINITY } else { datmat[(mpp, np)] };
    select_best(problem, &history, parmu, pole_violation, status, nfvals)
}

/// Best evaluated point under the final penalty, among the points no more
/// infeasible than the final pole. Ties prefer lower violation, then lower
/// objective, then the earlier evaluation.
fn select_best(
    problem: &OptProblem<'_>,
    history: &[Evaluated],
    parmu: f64,
    pole_violation: f64,
    status: OptStatus,
    n_evals: usize,
) -> OptResult {
    let best = history
        .iter()
        .enumerate()
        .filter(|(_, e)| e.violation <= pole_violation)
        .min_by(|(i, a), (j, b)| {
            let ma = a.f + parmu * a.violation;
            let mb = b.f + parmu * b.violation;
            ma.total_cmp(&mb)
                .then(a.violation.total_cmp(&b.violation))
                .then(a.f.total_cmp(&b.f))
                .then(i.cmp(j))
        });
    match best {
        Some((_, e)) => OptResult {
            x_best: e.x.clone(),
            f_best: e.f,
            max_violation: e.violation,
            status,
            n_evals,
        },
        None => {
            let x = problem.x0.clone();
            OptResult {
                f_best: (problem.objective)(&x),
                max_violation: problem.max_violation(&x),
                x_best: x,
                status,
                n_evals,
            }
        }
    }
}

/// max |simi * sim[:, 1..n] - I|
fn inverse_error(sim: &Mat, simi: &Mat, n: usize) -> f64 {
    let mut error = 0.0f64;
    for i in 1..=n {
        for j in 1..=n {
            let mut temp = if i == j { -1.0 } else { 0.0 };
            for k in 1..=n {
                temp += simi[(i, k)] * sim[(k, j)];
            }
            if !temp.is_finite() {
                return f64::INFINITY;
            }
            error = error.max(temp.abs());
        }
    }
    error
}

/// Gauss-Jordan inverse of `sim[:, 1..n]` with partial pivoting.
fn invert(sim: &Mat, n: usize) -> Option<Mat> {
    let mut lhs = Mat::zeros(n, n);
    let mut inv = Mat::zeros(n, n);
    let mut scale = 0.0f64;
    for i in 1..=n {
        inv[(i, i)] = 1.0;
        for j in 1..=n {
            lhs[(i, j)] = sim[(i, j)];
            scale = scale.max(sim[(i, j)].abs());
        }
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return None;
    }
    for col in 1..=n {
        let pivot = (col..=n).max_by(|&p, &q| lhs[(p, col)].abs().total_cmp(&lhs[(q, col)].abs()))?;
        if lhs[(pivot, col)].abs() <= 1e-13 * scale {
            return None;
        }
        if pivot != col {
            for j in 1..=n {
                let t = lhs[(col, j)];
                lhs[(col, j)] = lhs[(pivot, j)];
                lhs[(pivot, j)] = t;
                let t = inv[(col, j)];
                inv[(col, j)] = inv[(pivot, j)];
                inv[(pivot, j)] = t;
            }
        }
        let d = lhs[(col, col)];
        for j in 1..=n {
            lhs[(col, j)] /= d;
            inv[(col, j)] /= d;
        }
        for r in 1..=n {
            if r != col {
                let factor = lhs[(r, col)];
                if factor != 0.0 {
                    for j in 1..=n {
                        lhs[(r, j)] -= factor * lhs[(col, j)];
                        inv[(r, j)] -= factor * inv[(col, j)];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Orthonormal basis of the given vectors by modified Gram-Schmidt,
/// skipping vectors that are (numerically) dependent.
fn orthonormal_basis(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut r = v.clone();
        for q in &basis {
            let d: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            for (ri, qi) in r.iter_mut().zip(q) {
                *ri -= d * qi;
            }
        }
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 * norm0.max(f64::MIN_POSITIVE) {
            basis.push(r.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn residual(v: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let mut r = v.to_vec();
    for q in basis {
        let d: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
        for (ri, qi) in r.iter_mut().zip(q) {
            *ri -= d * qi;
        }
    }
    r
}

/// The vertex whose edge is closest to the span of the other edges, and a
/// unit direction orthogonal to those other edges.
fn worst_vertex(sim: &Mat, n: usize) -> (usize, Vec<f64>) {
    let columns: Vec<Vec<f64>> = (1..=n).map(|j| (1..=n).map(|i| sim[(i, j)]).collect()).collect();
    let mut worst = (1, f64::INFINITY);
    for j in 1..=n {
        let others: Vec<Vec<f64>> =
            columns.iter().enumerate().filter(|(k, _)| *k + 1 != j).map(|(_, c)| c.clone()).collect();
        let basis = orthonormal_basis(&others);
        let col = &columns[j - 1];
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        let r = residual(col, &basis);
        let rel = r.iter().map(|x| x * x).sum::<f64>().sqrt() / norm.max(f64::MIN_POSITIVE);
        if rel < worst.1 {
            worst = (j, rel);
        }
    }
    let j = worst.0;
    let others: Vec<Vec<f64>> =
        columns.iter().enumerate().filter(|(k, _)| *k + 1 != j).map(|(_, c)| c.clone()).collect();
    let basis = orthonormal_basis(&others);
    let mut best_dir = vec![0.0; n];
    let mut best_norm = -1.0;
    for axis in 0..n {
        let mut e = vec![0.0; n];
        e[axis] = 1.0;
        let r = residual(&e, &basis);
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > best_norm {
            best_norm = norm;
            best_dir = r.into_iter().map(|x| x / norm).collect();
        }
    }
    (j, best_dir)
}

/// The trust-region subproblem: first minimize the greatest linearized
/// constraint violation within radius `rho`, then use any remaining freedom
/// to reduce the linearized objective. Column `m + 1` of `a` holds minus the
/// objective gradient. Returns false when the step could not reach the
/// trust-region boundary.
fn trstlp(n: usize, m: usize, a: &Mat, b: &[f64], rho: f64, dx: &mut [f64]) -> bool {
    let mut z = Mat::zeros(n, n);
    let mut zdota = vec![0.0; n + 2];
    let mut vmultc = vec![0.0; m + 2];
    let mut vmultd = vec![0.0; m + 2];
    let mut sdirn = vec![0.0; n + 1];
    let mut dxnew = vec![0.0; n + 1];
    let mut iact = vec![0usize; m + 2];

    let mut mcon = m;
    let mut nact = 0usize;
    let mut resmax = 0.0f64;
    let mut icon = 0usize;
    for i in 1..=n {
        z[(i, i)] = 1.0;
        dx[i] = 0.0;
    }
    for k in 1..=m {
        if b[k] > resmax {
            resmax = b[k];
            icon = k;
        }
    }
    for k in 1..=m {
        iact[k] = k;
        vmultc[k] = resmax - b[k];
    }

    let mut start_stage_two = resmax == 0.0;
    loop {
        if start_stage_two {
            mcon = m + 1;
            icon = mcon;
            iact[mcon] = mcon;
            vmultc[mcon] = 0.0;
        }

        // end a stage after 3 iterations without progress
        let mut optold = 0.0f64;
        let mut icount = 0u32;
        let mut nactx = 0usize;
        'iteration: loop {
            let optnew = if mcon == m {
                resmax
            } else {
                let mut s = 0.0;
                for i in 1..=n {
                    s -= dx[i] * a[(i, mcon)];
                }
                s
            };
            if icount == 0 || optnew < optold {
                optold = optnew;
                nactx = nact;
                icount = 3;
            } else if nact > nactx {
                nactx = nact;
                icount = 3;
            } else {
                icount -= 1;
                if icount == 0 {
                    if mcon == m {
                        start_stage_two = true;
                        break 'iteration;
                    }
                    return false;
                }
            }

            if icon <= nact {
                // delete the constraint with index iact[icon]
                if icon < nact {
                    let isave = iact[icon];
                    let vsave = vmultc[icon];
                    let mut k = icon;
                    while k < nact {
                        let kp = k + 1;
                        let kk = iact[kp];
                        let mut sp = 0.0;
                        for i in 1..=n {
                            sp += z[(i, k)] * a[(i, kk)];
                        }
                        let temp = (sp * sp + zdota[kp] * zdota[kp]).sqrt();
                        let alpha = zdota[kp] / temp;
                        let beta = sp / temp;
                        zdota[kp] = alpha * zdota[k];
                        zdota[k] = temp;
                        for i in 1..=n {
                            let temp = alpha * z[(i, kp)] + beta * z[(i, k)];
                            z[(i, kp)] = alpha * z[(i, k)] - beta * z[(i, kp)];
                            z[(i, k)] = temp;
                        }
                        iact[k] = kk;
                        vmultc[k] = vmultc[kp];
                        k = kp;
                    }
                    iact[k] = isave;
                    vmultc[k] = vsave;
                }
                nact -= 1;
                if mcon == m {
                    let mut temp = 0.0;
                    for i in 1..=n {
                        temp += sdirn[i] * z[(i, nact + 1)];
                    }
                    for i in 1..=n {
                        sdirn[i] -= temp * z[(i, nact + 1)];
                    }
                }
            } else {
                // add constraint iact[icon], rotating z so that its last
                // n - nact - 1 columns are orthogonal to the new gradient
                let kk = iact[icon];
                for i in 1..=n {
                    dxnew[i] = a[(i, kk)];
                }
                let mut tot = 0.0f64;
                let mut k = n;
                while k > nact {
                    let mut sp = 0.0f64;
                    let mut spabs = 0.0f64;
                    for i in 1..=n {
                        let temp = z[(i, k)] * dxnew[i];
                        sp += temp;
                        spabs += temp.abs();
                    }
                    let acca = spabs + 0.1 * sp.abs();
                    let accb = spabs + 0.2 * sp.abs();
                    if spabs >= acca || acca >= accb {
                        sp = 0.0;
                    }
                    if tot == 0.0 {
                        tot = sp;
                    } else {
                        let kp = k + 1;
                        let temp = (sp * sp + tot * tot).sqrt();
                        let alpha = sp / temp;
                        let beta = tot / temp;
                        tot = temp;
                        for i in 1..=n {
                            let temp = alpha * z[(i, k)] + beta * z[(i, kp)];
                            z[(i, kp)] = alpha * z[(i, kp)] - beta * z[(i, k)];
                            z[(i, k)] = temp;
                        }
                    }
                    k -= 1;
                }

                if tot != 0.0 {
                    nact += 1;
                    zdota[nact] = tot;
                    vmultc[icon] = vmultc[nact];
                    vmultc[nact] = 0.0;
                } else {
                    // the new gradient is a combination of the active ones:
                    // one of them must make room
                    let mut ratio = -1.0f64;
                    let mut iout = 0usize;
                    let mut k = nact;
                    while k > 0 {
                        let mut zdotv = 0.0f64;
                        let mut zdvabs = 0.0f64;
                        for i in 1..=n {
                            let temp = z[(i, k)] * dxnew[i];
                            zdotv += temp;
                            zdvabs += temp.abs();
                        }
                        let acca = zdvabs + 0.1 * zdotv.abs();
                        let accb = zdvabs + 0.2 * zdotv.abs();
                        if zdvabs < acca && acca < accb {
                            let temp = zdotv / zdota[k];
                            if temp > 0.0 && iact[k] <= m {
                                let tempa = vmultc[k] / temp;
                                if ratio < 0.0 || tempa < ratio {
                                    ratio = tempa;
                                    iout = k;
                                }
                            }
                            if k >= 2 {
                                let kw = iact[k];
                                for i in 1..=n {
                                    dxnew[i] -= temp * a[(i, kw)];
                                }
                            }
                            vmultd[k] = temp;
                        } else {
                            vmultd[k] = 0.0;
                        }
                        k -= 1;
                    }
                    if ratio < 0.0 {
                        if mcon == m {
                            start_stage_two = true;
                            break 'iteration;
                        }
                        return false;
                    }

                    for k in 1..=nact {
                        vmultc[k] = (vmultc[k] - ratio * vmultd[k]).max(0.0);
                    }
                    if iout < nact {
                        let isave = iact[iout];
                        let vsave = vmultc[iout];
                        let mut k = iout;
                        while k < nact {
                            let kp = k + 1;
                            let kw = iact[kp];
                            let mut sp = 0.0;
                            for i in 1..=n {
                                sp += z[(i, k)] * a[(i, kw)];
                            }
                            let temp = (sp * sp + zdota[kp] * zdota[kp]).sqrt();
                            let alpha = zdota[kp] / temp;
                            let beta = sp / temp;
                            zdota[kp] = alpha * zdota[k];
                            zdota[k] = temp;
                            for i in 1..=n {
                                let temp = alpha * z[(i, kp)] + beta * z[(i, k)];
                                z[(i, kp)] = alpha * z[(i, k)] - beta * z[(i, kp)];
                                z[(i, k)] = temp;
                            }
                            iact[k] = kw;
                            vmultc[k] = vmultc[kp];
                            k = kp;
                        }
                        iact[k] = isave;
                        vmultc[k] = vsave;
                    }
                    let mut temp = 0.0;
                    for i in 1..=n {
                        temp += z[(i, nact)] * a[(i, kk)];
                    }
                    if temp == 0.0 {
                        if mcon == m {
                            start_stage_two = true;
                            break 'iteration;
                        }
                        return false;
                    }
                    zdota[nact] = temp;
                    vmultc[icon] = 0.0;
                    vmultc[nact] = ratio;
                }

                // keep the objective as the last active constraint in stage two
                iact[icon] = iact[nact];
                iact[nact] = kk;
                if mcon > m && kk != mcon {
                    let k = nact - 1;
                    let mut sp = 0.0;
                    for i in 1..=n {
                        sp += z[(i, k)] * a[(i, kk)];
                    }
                    let temp = (sp * sp + zdota[nact] * zdota[nact]).sqrt();
                    let alpha = zdota[nact] / temp;
                    let beta = sp / temp;
                    zdota[nact] = alpha * zdota[k];
                    zdota[k] = temp;
                    for i in 1..=n {
                        let temp = alpha * z[(i, nact)] + beta * z[(i, k)];
                        z[(i, nact)] = alpha * z[(i, k)] - beta * z[(i, nact)];
                        z[(i, k)] = temp;
                    }
                    iact[nact] = iact[k];
                    iact[k] = kk;
                    vmultc.swap(k, nact);
                }

                if mcon == m {
                    let kk = iact[nact];
                    let mut temp = 0.0;
                    for i in 1..=n {
                        temp += sdirn[i] * a[(i, kk)];
                    }
                    temp -= 1.0;
                    temp /= zdota[nact];
                    for i in 1..=n {
                        sdirn[i] -= temp * z[(i, nact)];
                    }
                }
            }

            if mcon > m {
                let temp = 1.0 / zdota[nact];
                for i in 1..=n {
                    sdirn[i] = temp * z[(i, nact)];
                }
            }

            // step to the trust-region boundary, or the step that zeroes resmax
            let mut dd = rho * rho;
            let mut sd = 0.0;
            let mut ss = 0.0;
            for i in 1..=n {
                if dx[i].abs() >= 1e-6 * rho {
                    dd -= dx[i] * dx[i];
                }
                sd += dx[i] * sdirn[i];
                ss += sdirn[i] * sdirn[i];
            }
            if dd <= 0.0 {
                if mcon == m {
                    start_stage_two = true;
                    break 'iteration;
                }
                return false;
            }
            let mut temp = (ss * dd).sqrt();
            if sd.abs() >= 1e-6 * temp {
                temp = (ss * dd + sd * sd).sqrt();
            }
            let stpful = dd / (temp + sd);
            let mut step = stpful;
            if mcon == m {
                let acca = step + 0.1 * resmax;
                let accb = step + 0.2 * resmax;
                if step >= acca || acca >= accb {
                    start_stage_two = true;
                    break 'iteration;
                }
                step = step.min(resmax);
            }

            for i in 1..=n {
                dxnew[i] = dx[i] + step * sdirn[i];
            }
            let mut resold = 0.0;
            if mcon == m {
                resold = resmax;
                resmax = 0.0;
                for k in 1..=nact {
                    let kk = iact[k];
                    let mut temp = b[kk];
                    for i in 1..=n {
                        temp -= a[(i, kk)] * dxnew[i];
                    }
                    resmax = resmax.max(temp);
                }
            }

            // multipliers that would hold if dx became dxnew
            let mut k = nact;
            loop {
                if k == 0 {
                    break;
                }
                let mut zdotw = 0.0f64;
                let mut zdwabs = 0.0f64;
                for i in 1..=n {
                    let temp = z[(i, k)] * dxnew[i];
                    zdotw += temp;
                    zdwabs += temp.abs();
                }
                let acca = zdwabs + 0.1 * zdotw.abs();
                let accb = zdwabs + 0.2 * zdotw.abs();
                if zdwabs >= acca || acca >= accb {
                    zdotw = 0.0;
                }
                vmultd[k] = zdotw / zdota[k];
                if k >= 2 {
                    let kk = iact[k];
                    for i in 1..=n {
                        dxnew[i] -= vmultd[k] * a[(i, kk)];
                    }
                    k -= 1;
                } else {
                    break;
                }
            }
            if mcon > m {
                vmultd[nact] = vmultd[nact].max(0.0);
            }

            for i in 1..=n {
                dxnew[i] = dx[i] + step * sdirn[i];
            }
            if mcon > nact {
                for k in nact + 1..=mcon {
                    let kk = iact[k];
                    let mut sum = resmax - b[kk];
                    let mut sumabs = resmax + b[kk].abs();
                    for i in 1..=n {
                        let temp = a[(i, kk)] * dxnew[i];
                        sum += temp;
                        sumabs += temp.abs();
                    }
                    let acca = sumabs + 0.1 * sum.abs();
                    let accb = sumabs + 0.2 * sum.abs();
                    if sumabs >= acca || acca >= accb {
                        sum = 0.0;
                    }
                    vmultd[k] = sum;
                }
            }

            // fraction of the step from dx to dxnew that is taken
            let mut ratio = 1.0f64;
            icon = 0;
            for k in 1..=mcon {
                if vmultd[k] < 0.0 {
                    let temp = vmultc[k] / (vmultc[k] - vmultd[k]);
                    if temp < ratio {
                        ratio = temp;
                        icon = k;
                    }
                }
            }

            let temp = 1.0 - ratio;
            for i in 1..=n {
                dx[i] = temp * dx[i] + ratio * dxnew[i];
            }
            for k in 1..=mcon {
                vmultc[k] = (temp * vmultc[k] + ratio * vmultd[k]).max(0.0);
            }
            if mcon == m {
                resmax = resold + ratio * (resmax - resold);
            }

            if icon > 0 {
                continue 'iteration;
            }
            if step == stpful {
                return true;
            }
            start_stage_two = true;
            break 'iteration;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn quadratic_unconstrained() {
        let p = OptProblem::new(vec![0.0], |x| (x[0] - 1.0).powi(2)).rho(0.5, 1e-8);
        let r = minimize(&p);
        assert_eq!(r.status, OptStatus::Converged);
        assert!((r.x_best[0] - 1.0).abs() < 1e-6, "{:?}", r);
    }

    #[test]
    fn linear_on_disc() {
        let p = OptProblem::new(vec![0.0, 0.0], |x| x[0] + x[1])
            .constraint(|x| 1.0 - x[0] * x[0] - x[1] * x[1])
            .rho(0.5, 1e-6);
        let r = minimize(&p);
        let t = -std::f64::consts::FRAC_1_SQRT_2;
        assert!((r.x_best[0] - t).abs() < 1e-5 && (r.x_best[1] - t).abs() < 1e-5, "{:?}", r);
        assert!(r.max_violation < 1e-5);
    }

    #[test]
    fn check_feasible_examples() {
        let p = OptProblem::new(vec![0.0], |x| x[0]).constraint(|x| x[0]);
        assert!(check_feasible(&p, &[0.0], 0.0));
        assert!(check_feasible(&p, &[-1e-9], 1e-8));
        assert!(!check_feasible(&p, &[-1.0], 1e-8));
    }

    #[test]
    fn budget_is_respected() {
        for max_evals in 1..60 {
            let calls = AtomicUsize::new(0);
            let p = OptProblem::new(vec![3.0, -2.0], |x| {
                calls.fetch_add(1, Ordering::Relaxed);
                (x[0] - 1.0).powi(2) + 4.0 * (x[1] + 0.5).powi(2)
            })
            .constraint(|x| x[0] + x[1])
            .rho(0.5, 1e-10)
            .max_evals(max_evals);
            let r = minimize(&p);
            let used = calls.load(Ordering::Relaxed);
            assert!(used <= max_evals);
            assert_eq!(r.n_evals, used);
        }
    }

    #[test]
    fn non_finite_objective_stops() {
        let p = OptProblem::new(vec![0.0], |x| if x[0] > 0.2 { f64::NAN } else { -x[0] });
        let r = minimize(&p);
        assert_eq!(r.status, OptStatus::DegenerateSimplex);
        assert!(r.f_best.is_finite());
    }

    #[test]
    fn pole_merit_never_rises_at_fixed_penalty() {
        let p = OptProblem::new(vec![-1.0, 1.0], |x| 10.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2))
            .constraint(|x| 1.0 - x[0] - x[1])
            .rho(0.5, 1e-7);
        let (_, trace) = minimize_traced(&p);
        assert!(trace.len() > 10);
        for w in trace.windows(2) {
            if w[0].parmu == w[1].parmu {
                let before = w[0].f + w[0].parmu * w[0].violation;
                let after = w[1].f + w[1].parmu * w[1].violation;
                assert!(after <= before, "{before} -> {after}");
            }
        }
    }

    #[test]
    fn inversion_and_orthogonal_repair() {
        let mut sim = Mat::zeros(2, 3);
        sim[(1, 1)] = 2.0;
        sim[(2, 1)] = 1.0;
        sim[(1, 2)] = 1.0;
        sim[(2, 2)] = 3.0;
        let inv = invert(&sim, 2).unwrap();
        assert!(inverse_error(&sim, &inv, 2) < 1e-15);

        // parallel edges: the second is rebuilt orthogonal to the first
        sim[(1, 2)] = 4.0;
        sim[(2, 2)] = 2.0;
        assert!(invert(&sim, 2).is_none());
        let (_, dir) = worst_vertex(&sim, 2);
        let dot = dir[0] * 2.0 + dir[1] * 1.0;
        assert!(dot.abs() < 1e-12);
        assert!(((dir[0] * dir[0] + dir[1] * dir[1]).sqrt() - 1.0).abs() < 1e-12);
    }
}
