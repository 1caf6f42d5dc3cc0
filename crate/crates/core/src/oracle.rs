//! Slow, independent reference implementations used by the test suites to
//! verify the production code paths. Nothing here is called by the
//! pipeline itself: every function is a brute-force or closed-form oracle
//! kept deliberately separate from the implementations it checks.

/// Exhaustively optimal 2-partition of points by k-means distortion
/// (sum of squared distances to each side's mean). Point 0 is pinned to
/// side 0 to halve the search. Returns (assignment, distortion).
pub fn optimal_two_partition(points: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = points.len();
    assert!((2..=20).contains(&n), "exhaustive search needs 2..=20 points");
    let dim = points[0].len();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for mask in 0..(1u32 << (n - 1)) {
        let assign: Vec<usize> =
            (0..n).map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize }).collect();
        if !assign.contains(&1) {
            continue;
        }
        let mut distortion = 0.0;
        for side in 0..2 {
            let members: Vec<&Vec<f64>> =
                points.iter().zip(&assign).filter(|(_, &a)| a == side).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for p in &members {
                for (m, v) in mean.iter_mut().zip(p.iter()) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= members.len() as f64;
            }
            for p in &members {
                distortion += p.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>();
            }
        }
        if best.as_ref().map_or(true, |(_, d)| distortion < *d) {
            best = Some((assign, distortion));
        }
    }
    best.expect("at least one non-trivial partition")
}

/// Exact AUC by pair counting; ties contribute 1/2.
pub fn exact_auc(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let mut pairs = 0.0f64;
    let mut wins = 0.0f64;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    assert!(pairs > 0.0, "need both classes");
    wins / pairs
}

/// Closed-form eigendecomposition of the symmetric matrix [[a, b], [b, c]].
/// Returns ((lambda1, v1), (lambda2, v2)) with lambda1 >= lambda2 and unit
/// eigenvectors.
pub fn sym_eig_2x2(a: f64, b: f64, c: f64) -> ((f64, [f64; 2]), (f64, [f64; 2])) {
    let tr = a + c;
    let det = a * c - b * b;
    let disc = ((tr * tr) / 4.0 - det).max(0.0).sqrt();
    let l1 = tr / 2.0 + disc;
    let l2 = tr / 2.0 - disc;
    let v1 = if b.abs() > 1e-300 {
        normalize2([l1 - c, b])
    } else if a >= c {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    let v2 = [-v1[1], v1[0]];
    ((l1, v1), (l2, v2))
}

fn normalize2(v: [f64; 2]) -> [f64; 2] {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    [v[0] / n, v[1] / n]
}

/// Soft-margin linear SVM oracle for tiny problems: coarse-to-fine grid
/// search over the dual variables. The equality constraint sum(alpha*y) = 0
/// eliminates the last variable. Returns (w, b, primal objective).
///
/// The primal objective is 1/2 ||w||^2 + c * sum hinge; the bias is chosen
/// as the primal-optimal breakpoint for the recovered w.
pub fn svm_dual_oracle(x: &[Vec<f64>], y: &[f64], c: f64) -> (Vec<f64>, f64, f64) {
    let n = x.len();
    assert!((2..=6).contains(&n), "oracle is exhaustive; use <= 6 points");
    let dim = x[0].len();
    let kernel: Vec<Vec<f64>> = x
        .iter()
        .map(|a| x.iter().map(|b| a.iter().zip(b).map(|(p, q)| p * q).sum()).collect())
        .collect();

    let dual = |alpha: &[f64]| -> f64 {
        let mut obj: f64 = alpha.iter().sum();
        for i in 0..n {
            if alpha[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                obj -= 0.5 * alpha[i] * alpha[j] * y[i] * y[j] * kernel[i][j];
            }
        }
        obj
    };

    let free = n - 1;
    let mut center = vec![c / 2.0; free];
    let mut span = c / 2.0;
    let grid = 9usize;
    let mut best_alpha: Option<(Vec<f64>, f64)> = None;
    for _level in 0..10 {
        let mut idx = vec![0usize; free];
        loop {
            let mut alpha = vec![0.0f64; n];
            for i in 0..free {
                let t = if grid == 1 { 0.0 } else { idx[i] as f64 / (grid - 1) as f64 * 2.0 - 1.0 };
                alpha[i] = (center[i] + t * span).clamp(0.0, c);
            }
            let partial: f64 = (0..free).map(|i| alpha[i] * y[i]).sum();
            let last = -partial / y[n - 1];
            if (-1e-12..=c + 1e-12).contains(&last) {
                alpha[n - 1] = last.clamp(0.0, c);
                let obj = dual(&alpha);
                if best_alpha.as_ref().map_or(true, |(_, b)| obj > *b) {
                    best_alpha = Some((alpha, obj));
                }
            }
            // Odometer over the grid.
            let mut i = 0;
            loop {
                if i == free {
                    break;
                }
                idx[i] += 1;
                if idx[i] < grid {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
            if i == free {
                break;
            }
        }
        let (alpha, _) = best_alpha.as_ref().expect("feasible grid point");
        center = alpha[..free].to_vec();
        span /= 3.0;
    }

    let (alpha, _) = best_alpha.expect("feasible grid point");
    let mut w = vec![0.0f64; dim];
    for i in 0..n {
        for d in 0..dim {
            w[d] += alpha[i] * y[i] * x[i][d];
        }
    }

    // The primal objective is convex piecewise-linear in b, so a breakpoint
    // b = y_i - w.x_i is optimal.
    let primal = |b: f64| -> f64 {
        let reg: f64 = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
        let hinge: f64 = (0..n)
            .map(|i| {
                let m = y[i] * (w.iter().zip(&x[i]).map(|(a, b)| a * b).sum::<f64>() + b);
                (1.0 - m).max(0.0)
            })
            .sum();
        reg + c * hinge
    };
    let mut best_b = 0.0;
    let mut best_obj = primal(0.0);
    for i in 0..n {
        let b = y[i] - w.iter().zip(&x[i]).map(|(a, v)| a * v).sum::<f64>();
        let obj = primal(b);
        if obj < best_obj {
            best_obj = obj;
            best_b = b;
        }
    }
    (w, best_b, best_obj)
}
