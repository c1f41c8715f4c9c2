//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The search direction comes from the usual two-loop recursion with the
//! initial Hessian scaled by `sᵀy / yᵀy`. Step lengths are found by
//! bracketing and zooming with safeguarded cubic interpolation.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    /// Maximum number of accepted iterations.
    pub max_iters: usize,
    /// Number of stored `(s, y)` pairs.
    pub history: usize,
    /// Stop once the gradient norm drops below this.
    pub grad_tol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_evals: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            history: 10,
            grad_tol: 1e-9,
            c1: 1e-4,
            c2: 0.9,
            max_line_evals: 30,
        }
    }
}

impl LbfgsOptions {
    pub fn with_iters(max_iters: usize, history: usize) -> Self {
        Self {
            max_iters,
            history,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.history == 0 {
            return Err(Error::invalid("L-BFGS history must be positive"));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::invalid("line search needs 0 < c1 < c2 < 1"));
        }
        if self.max_line_evals == 0 {
            return Err(Error::invalid("line search needs at least one evaluation"));
        }
        Ok(())
    }
}

/// One line of the progress log. Iteration 0 is the starting point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    IterationBudget,
    /// No acceptable step along a steepest-descent direction either.
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsReport {
    /// Lowest-objective point seen.
    pub x: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub stop: StopReason,
}

#[derive(Clone)]
struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

#[derive(Clone)]
struct Trial {
    alpha: f64,
    f: f64,
    dphi: f64,
    point: Point,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizer of the cubic through `(a, fa, da)` and `(b, fb, db)`, if any.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = db - da + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let m = b - (b - a) * (db + d2 - d1) / denom;
    m.is_finite().then_some(m)
}

struct Searcher<'a, F> {
    objective: &'a mut F,
    evaluations: usize,
    iteration: usize,
    best: Option<Point>,
}

impl<F> Searcher<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&mut self, x: Vec<f64>, step: f64) -> Result<Point> {
        let (f, g) = (self.objective)(&x)?;
        self.evaluations += 1;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                iteration: self.iteration,
                step,
                message: "objective or gradient is not finite".into(),
            });
        }
        if g.len() != x.len() {
            return Err(Error::invalid(
                "objective returned a gradient of the wrong length",
            ));
        }
        if self.best.as_ref().is_none_or(|b| f < b.f) {
            self.best = Some(Point {
                x: x.clone(),
                f,
                g: g.clone(),
            });
        }
        Ok(Point { x, f, g })
    }

    fn trial(&mut self, x0: &[f64], d: &[f64], alpha: f64) -> Result<Trial> {
        let x = x0.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
        let point = self.eval(x, alpha)?;
        Ok(Trial {
            alpha,
            f: point.f,
            dphi: dot(&point.g, d),
            point,
        })
    }

    /// Returns a step satisfying the strong Wolfe conditions, or the best
    /// sufficient-decrease step found when the budget runs out.
    fn line_search(
        &mut self,
        start: &Point,
        d: &[f64],
        alpha0: f64,
        opts: &LbfgsOptions,
    ) -> Result<Option<Trial>> {
        let f0 = start.f;
        let dphi0 = dot(&start.g, d);
        let armijo = |t: &Trial| t.f <= f0 + opts.c1 * t.alpha * dphi0;
        let curvature = |t: &Trial| t.dphi.abs() <= -opts.c2 * dphi0;
        // Near a minimizer the decrease can drop below the rounding error of
        // `f`; a step that does not raise `f` and meets the curvature
        // condition is then accepted as is.
        let flat_ok = |t: &Trial| t.f <= f0 && curvature(t);

        let mut prev = Trial {
            alpha: 0.0,
            f: f0,
            dphi: dphi0,
            point: Point {
                x: start.x.clone(),
                f: f0,
                g: start.g.clone(),
            },
        };
        let mut alpha = alpha0;
        let mut evals = 0;
        let (mut lo, mut hi);
        loop {
            let cur = self.trial(&start.x, d, alpha)?;
            evals += 1;
            if !armijo(&cur) && flat_ok(&cur) {
                return Ok(Some(cur));
            }
            if !armijo(&cur) || (prev.alpha > 0.0 && cur.f >= prev.f) {
                lo = prev;
                hi = cur;
                break;
            }
            if curvature(&cur) {
                return Ok(Some(cur));
            }
            if cur.dphi >= 0.0 {
                lo = cur;
                hi = prev;
                break;
            }
            if evals >= opts.max_line_evals {
                return Ok(Some(cur));
            }
            // Extrapolate, keeping the new step between 1.1 and 4 times the old.
            let guess = cubic_min(prev.alpha, prev.f, prev.dphi, cur.alpha, cur.f, cur.dphi);
            let (lo_b, hi_b) = (1.1 * cur.alpha, 4.0 * cur.alpha);
            alpha = match guess {
                Some(a) if a > lo_b && a < hi_b => a,
                _ => hi_b,
            };
            prev = cur;
        }

        // Zoom: `lo` satisfies sufficient decrease and has the lower value.
        let mut fallback = (lo.alpha > 0.0).then(|| lo.clone());
        while evals < opts.max_line_evals {
            let width = hi.alpha - lo.alpha;
            if width.abs() <= f64::EPSILON * lo.alpha.abs().max(hi.alpha.abs()) {
                break;
            }
            let (a_min, a_max) = if width > 0.0 {
                (lo.alpha + 0.1 * width, hi.alpha - 0.1 * width)
            } else {
                (hi.alpha - 0.1 * width, lo.alpha + 0.1 * width)
            };
            let a = match cubic_min(lo.alpha, lo.f, lo.dphi, hi.alpha, hi.f, hi.dphi) {
                Some(a) if a >= a_min && a <= a_max => a,
                _ => 0.5 * (lo.alpha + hi.alpha),
            };
            let cur = self.trial(&start.x, d, a)?;
            evals += 1;
            if !armijo(&cur) && flat_ok(&cur) && cur.f <= lo.f {
                return Ok(Some(cur));
            }
            if !armijo(&cur) || cur.f >= lo.f {
                hi = cur;
            } else {
                if curvature(&cur) {
                    return Ok(Some(cur));
                }
                if cur.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
                if fallback.as_ref().is_none_or(|fb| lo.f < fb.f) {
                    fallback = Some(lo.clone());
                }
            }
        }
        Ok(fallback.filter(|t| t.f < f0))
    }
}

fn two_loop(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let scale = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= scale;
        }
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Minimizes `objective`, which returns the value and gradient at a point.
///
/// `log` receives the starting point as iteration 0 and then every accepted
/// iterate. The returned point is the lowest objective value evaluated.
pub fn lbfgs_minimize<F, L>(
    mut objective: F,
    x0: Vec<f64>,
    opts: &LbfgsOptions,
    mut log: L,
) -> Result<LbfgsReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    L: FnMut(&IterationRecord),
{
    opts.validate()?;
    let mut search = Searcher {
        objective: &mut objective,
        evaluations: 0,
        iteration: 0,
        best: None,
    };
    let mut cur = search.eval(x0, 0.0)?;
    log(&IterationRecord {
        iter: 0,
        objective: cur.f,
        grad_norm: norm(&cur.g),
        step: 0.0,
    });

    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.history);
    let mut iterations = 0;
    let stop = loop {
        let gn = norm(&cur.g);
        if gn < opts.grad_tol {
            break StopReason::GradientTolerance;
        }
        if iterations >= opts.max_iters {
            break StopReason::IterationBudget;
        }
        search.iteration = iterations + 1;

        let mut d = two_loop(&cur.g, &hist);
        let mut alpha0 = 1.0;
        if hist.is_empty() || dot(&d, &cur.g) >= 0.0 {
            hist.clear();
            d = cur.g.iter().map(|v| -v).collect();
            alpha0 = (1.0 / gn).min(1.0);
        }
        let mut found = search.line_search(&cur, &d, alpha0, opts)?;
        if found.is_none() && !hist.is_empty() {
            // Quasi-Newton direction failed; retry once along -g.
            hist.clear();
            d = cur.g.iter().map(|v| -v).collect();
            found = search.line_search(&cur, &d, (1.0 / gn).min(1.0), opts)?;
        }
        let Some(trial) = found else {
            break StopReason::LineSearchFailed;
        };

        let s: Vec<f64> = trial
            .point
            .x
            .iter()
            .zip(&cur.x)
            .map(|(a, b)| a - b)
            .collect();
        let y: Vec<f64> = trial
            .point
            .g
            .iter()
            .zip(&cur.g)
            .map(|(a, b)| a - b)
            .collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if hist.len() == opts.history {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        cur = trial.point;
        iterations += 1;
        log(&IterationRecord {
            iter: iterations,
            objective: cur.f,
            grad_norm: norm(&cur.g),
            step: trial.alpha,
        });
    };

    let evaluations = search.evaluations;
    let best = search.best.expect("at least one evaluation");
    Ok(LbfgsReport {
        grad_norm: norm(&best.g),
        objective: best.f,
        x: best.x,
        iterations,
        evaluations,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GaussianStream;
    use proptest::prelude::*;

    fn quad(c: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let g: Vec<f64> = x.iter().zip(&c).map(|(a, b)| a - b).collect();
            Ok((0.5 * dot(&g, &g), g))
        }
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Ok((f, g))
    }

    #[test]
    fn isotropic_quadratic_in_few_iterations() {
        let c = vec![1.0, -2.0, 3.5, 0.25];
        let r = lbfgs_minimize(
            quad(c.clone()),
            vec![0.0; 4],
            &LbfgsOptions::default(),
            |_| {},
        )
        .unwrap();
        assert!(r.iterations <= 3, "took {} iterations", r.iterations);
        for (a, b) in r.x.iter().zip(&c) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(r.stop, StopReason::GradientTolerance);
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let opts = LbfgsOptions::with_iters(200, 10);
        let r = lbfgs_minimize(rosenbrock, vec![-1.2, 1.0], &opts, |_| {}).unwrap();
        assert!(r.iterations <= 200);
        assert!(
            (r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6,
            "{:?}",
            r.x
        );
    }

    fn psd_problem(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut s = GaussianStream::new(seed);
        let b: Vec<f64> = (0..n * n).map(|_| s.next_normal()).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| b[k * n + i] * b[k * n + j]).sum::<f64>() / n as f64;
            }
            a[i * n + i] += 0.1;
        }
        let rhs = (0..n).map(|_| s.next_normal()).collect();
        (a, rhs)
    }

    #[test]
    fn random_psd_quadratic() {
        // Centered form, so the value itself goes to zero and stays resolvable.
        let n = 50;
        let (a, c) = psd_problem(n, 11);
        let f = |x: &[f64]| {
            let r: Vec<f64> = x.iter().zip(&c).map(|(p, q)| p - q).collect();
            let g: Vec<f64> = (0..n).map(|i| dot(&a[i * n..(i + 1) * n], &r)).collect();
            Ok((0.5 * dot(&r, &g), g))
        };
        let opts = LbfgsOptions::with_iters(1000, 10);
        let r = lbfgs_minimize(f, vec![0.0; n], &opts, |_| {}).unwrap();
        assert!(
            r.grad_norm <= 1e-8,
            "grad norm {} ({:?})",
            r.grad_norm,
            r.stop
        );
    }

    #[test]
    fn zero_budget_returns_start() {
        let opts = LbfgsOptions::with_iters(0, 10);
        let x0 = vec![3.0, 4.0];
        let r = lbfgs_minimize(quad(vec![0.0, 0.0]), x0.clone(), &opts, |_| {}).unwrap();
        assert_eq!(r.x, x0);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.evaluations, 1);
        assert_eq!(r.stop, StopReason::IterationBudget);
    }

    #[test]
    fn non_finite_objective_aborts() {
        let f = |x: &[f64]| {
            let v = if x[0] > 0.5 { f64::NAN } else { -x[0] };
            Ok((v, vec![-1.0]))
        };
        let err = lbfgs_minimize(f, vec![0.0], &LbfgsOptions::default(), |_| {}).unwrap_err();
        match err {
            Error::Numeric {
                iteration, step, ..
            } => {
                assert_eq!(iteration, 1);
                assert!(step > 0.5);
            }
            e => panic!("unexpected {e:?}"),
        }
        let bad_start = |_: &[f64]| Ok((f64::INFINITY, vec![0.0]));
        assert!(matches!(
            lbfgs_minimize(bad_start, vec![0.0], &LbfgsOptions::default(), |_| {}),
            Err(Error::Numeric { iteration: 0, .. })
        ));
    }

    #[test]
    fn bad_options_rejected() {
        let mut o = LbfgsOptions::default();
        o.history = 0;
        assert!(lbfgs_minimize(quad(vec![0.0]), vec![1.0], &o, |_| {}).is_err());
        let mut o = LbfgsOptions::default();
        o.c2 = 1e-5;
        assert!(lbfgs_minimize(quad(vec![0.0]), vec![1.0], &o, |_| {}).is_err());
    }

    #[test]
    fn deterministic_log() {
        let run = || {
            let mut log = Vec::new();
            let opts = LbfgsOptions::with_iters(30, 5);
            lbfgs_minimize(rosenbrock, vec![-1.2, 1.0], &opts, |r| log.push(*r)).unwrap();
            log
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a[0].iter, 0);
        assert_eq!(a.len(), 31);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn accepted_objectives_never_increase(seed in any::<u64>(), n in 2usize..12) {
            let (a, rhs) = psd_problem(n, seed);
            // Non-quadratic but smooth: a quadratic plus a quartic penalty.
            let f = |x: &[f64]| {
                let ax: Vec<f64> = (0..n).map(|i| dot(&a[i * n..(i + 1) * n], x)).collect();
                let q: f64 = x.iter().map(|v| v.powi(4)).sum();
                let g = (0..n).map(|i| ax[i] - rhs[i] + 0.4 * x[i].powi(3)).collect();
                Ok((0.5 * dot(x, &ax) - dot(&rhs, x) + 0.1 * q, g))
            };
            let mut objs = Vec::new();
            let opts = LbfgsOptions::with_iters(40, 4);
            let r = lbfgs_minimize(f, vec![1.0; n], &opts, |rec| objs.push(rec.objective)).unwrap();
            for w in objs.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(r.objective <= objs[0]);
        }
    }
}
