use crate::nn::{NnError, ParamStore, Real, Tape, Tensor, Var};

pub const KOLEO_EPS: f64 = 1e-8;

/// Row-wise `softmax((logits - center) / temp)`.
pub fn teacher_targets<T: Real>(logits: &Tensor<T>, temp: T, center: &[T]) -> Result<Tensor<T>, NnError> {
    let (r, k) = logits.dims2();
    if center.len() != k {
        return Err(NnError::Shape(format!("center has {} entries, logits {k}", center.len())));
    }
    if temp <= T::zero() || !temp.is_finite() {
        return Err(NnError::Shape("temperature must be positive".into()));
    }
    if !logits.is_finite() {
        return Err(NnError::NonFinite("teacher logits".into()));
    }
    let mut out = Vec::with_capacity(r * k);
    for i in 0..r {
        let z: Vec<T> = logits.row_slice(i).iter().zip(center).map(|(&l, &c)| (l - c) / temp).collect();
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::matrix(r, k, out)
}

/// Cross entropy between each global teacher view and every other student view,
/// averaged over all pairs. Students `0..teacher.len()` are the global crops.
pub fn dino_global_loss<T: Real>(
    tape: &mut Tape<T>,
    student_logits: &[Var],
    teacher_probs: &[Tensor<T>],
    student_temp: T,
) -> Result<Var, NnError> {
    if teacher_probs.is_empty() || student_logits.len() < teacher_probs.len() {
        return Err(NnError::Shape("need at least as many student views as teacher views".into()));
    }
    let mut total: Option<Var> = None;
    let mut pairs = 0usize;
    for (t, probs) in teacher_probs.iter().enumerate() {
        for (s, &logits) in student_logits.iter().enumerate() {
            if s == t {
                continue;
            }
            let ce = tape.soft_cross_entropy(logits, probs, student_temp)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
            pairs += 1;
        }
    }
    match total {
        Some(v) => tape.scale(v, T::c(1.0 / pairs as f64)),
        None => Err(NnError::Shape("no (teacher, student) pairs".into())),
    }
}

/// Mean cross entropy over masked positions; zero when nothing is masked.
pub fn ibot_masked_loss<T: Real>(
    tape: &mut Tape<T>,
    student_logits: Option<Var>,
    teacher_probs: &Tensor<T>,
    student_temp: T,
) -> Result<Var, NnError> {
    match student_logits {
        Some(l) if teacher_probs.rows() > 0 => tape.soft_cross_entropy(l, teacher_probs, student_temp),
        _ => {
            log::debug!("masked-token loss over an empty mask is 0");
            tape.constant(Tensor::scalar(T::zero()))
        }
    }
}

/// Nearest other row of each row by Euclidean distance (lowest index on ties).
pub fn nearest_neighbours<T: Real>(x: &Tensor<T>) -> Vec<usize> {
    let n = x.rows();
    (0..n)
        .map(|i| {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in (0..n).filter(|&j| j != i) {
                let d: f64 = x
                    .row_slice(i)
                    .iter()
                    .zip(x.row_slice(j))
                    .map(|(&a, &b)| (a - b).f64().powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// `-(1/n) sum_i log(d_i + eps)` where `d_i` is the distance to the nearest other row.
pub fn koleo_regularizer<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var, NnError> {
    let n = tape.dims(z).0;
    if n < 2 {
        return Err(NnError::Shape("KoLeo needs at least two vectors".into()));
    }
    let nn = nearest_neighbours(tape.value(z));
    let other = tape.select_rows(z, &nn)?;
    let diff = tape.sub(z, other)?;
    let d = tape.row_norm(diff)?;
    let d = tape.add_scalar(d, T::c(KOLEO_EPS))?;
    let l = tape.log(d)?;
    let m = tape.mean_all(l)?;
    tape.scale(m, -T::one())
}

/// `teacher <- m * teacher + (1 - m) * student`.
pub fn ema_update<T: Real>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, m: f64) -> Result<(), NnError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(NnError::Shape(format!("momentum {m} outside [0, 1]")));
    }
    for (name, e) in student.iter() {
        let t = teacher
            .value_mut(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if t.shape() != e.value.shape() {
            return Err(NnError::Layout(format!("shape of {name}")));
        }
    }
    if teacher.len() != student.len() {
        return Err(NnError::Layout("teacher and student differ in parameter names".into()));
    }
    let (a, b) = (T::c(m), T::c(1.0 - m));
    for (name, e) in student.iter() {
        let t = teacher.value_mut(name).expect("checked");
        for (x, &y) in t.data_mut().iter_mut().zip(e.value.data()) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}

/// `center <- momentum * center + (1 - momentum) * mean_rows(logits)`.
pub fn center_update<T: Real>(center: &mut [T], logits: &Tensor<T>, momentum: f64) -> Result<(), NnError> {
    let (r, k) = logits.dims2();
    if k != center.len() {
        return Err(NnError::Shape("center length".into()));
    }
    if r == 0 {
        return Ok(());
    }
    let mut mean = vec![0.0f64; k];
    for i in 0..r {
        for (m, &v) in mean.iter_mut().zip(logits.row_slice(i)) {
            *m += v.f64();
        }
    }
    for (c, m) in center.iter_mut().zip(mean) {
        *c = T::c(momentum * c.f64() + (1.0 - momentum) * (m / r as f64));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckConfig};
    use crate::rng::keyed_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = keyed_rng(seed, &[]);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn softmax_ref(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    fn ce_ref(p: &[f64], logits: &[f64], temp: f64) -> f64 {
        let z: Vec<f64> = logits.iter().map(|v| v / temp).collect();
        let q = softmax_ref(&z);
        -p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>()
    }

    #[test]
    fn equal_logits_give_uniform_targets() {
        let logits = Tensor::full(&[2, 5], 3.0f64);
        let p = teacher_targets(&logits, 0.04, &[0.0; 5]).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let l = random(1, 5, 1, 2.0);
        let p = teacher_targets(&l, 0.07, l.data()).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn teacher_targets_match_scalar_softmax() {
        let l = random(4, 9, 2, 1.0);
        let c: Vec<f64> = (0..9).map(|i| i as f64 * 0.01).collect();
        let p = teacher_targets(&l, 0.04, &c).unwrap();
        for r in 0..4 {
            let z: Vec<f64> = l.row_slice(r).iter().zip(&c).map(|(a, b)| (a - b) / 0.04).collect();
            for (a, b) in p.row_slice(r).iter().zip(softmax_ref(&z)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn teacher_targets_reject_nan_and_bad_temp() {
        let l = Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(teacher_targets(&l, 0.1, &[0.0; 2]).is_err());
        assert!(teacher_targets(&random(1, 2, 0, 1.0), 0.0, &[0.0; 2]).is_err());
    }

    proptest! {
        #[test]
        fn teacher_rows_sum_to_one(seed in 0u64..500, temp in 0.01f64..1.0) {
            let l = random(3, 17, seed, 5.0);
            let c = random(1, 17, seed + 1, 5.0);
            let p = teacher_targets(&l, temp, c.data()).unwrap();
            for r in 0..3 {
                prop_assert!((p.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn one_hot_teacher_uniform_student_is_ln_k() {
        let k = 7;
        let mut onehot = vec![0.0; 2 * k];
        onehot[3] = 1.0;
        onehot[k + 1] = 1.0;
        let probs = Tensor::matrix(2, k, onehot).unwrap();
        let mut tape = Tape::<f64>::new();
        let students: Vec<Var> = (0..4).map(|_| tape.constant(Tensor::zeros(&[2, k])).unwrap()).collect();
        let l = dino_global_loss(&mut tape, &students, &[probs.clone(), probs], 0.1).unwrap();
        assert!((tape.scalar(l) - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn matching_student_gives_teacher_entropy() {
        let logits = random(1, 6, 3, 1.0);
        let p = teacher_targets(&logits, 0.1, &[0.0; 6]).unwrap();
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(logits.clone()).unwrap();
        let l = dino_global_loss(&mut tape, &[s, s], &[p.clone(), p.clone()], 0.1).unwrap();
        let h: f64 = -p.data().iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((tape.scalar(l) - h).abs() < 1e-12);
    }

    #[test]
    fn global_loss_pairs_and_average() {
        let (b, k) = (2, 5);
        let teachers: Vec<Tensor<f64>> = (0..2)
            .map(|i| teacher_targets(&random(b, k, 10 + i, 1.0), 0.05, &[0.0; 5]).unwrap())
            .collect();
        let students: Vec<Tensor<f64>> = (0..5).map(|i| random(b, k, 20 + i, 1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = students.iter().map(|s| tape.constant(s.clone()).unwrap()).collect();
        let l = dino_global_loss(&mut tape, &vars, &teachers, 0.1).unwrap();
        let mut total = 0.0;
        let mut pairs = 0;
        for (t, tp) in teachers.iter().enumerate() {
            for (s, sl) in students.iter().enumerate() {
                if s == t {
                    continue;
                }
                let mut ce = 0.0;
                for r in 0..b {
                    ce += ce_ref(tp.row_slice(r), sl.row_slice(r), 0.1);
                }
                total += ce / b as f64;
                pairs += 1;
            }
        }
        assert_eq!(pairs, 8);
        assert!((tape.scalar(l) - total / pairs as f64).abs() < 1e-12);
    }

    #[test]
    fn global_loss_grad_check() {
        let mut store = ParamStore::<f64>::new();
        for i in 0..4 {
            store.insert(format!("s{i}"), random(2, 6, 30 + i, 1.0));
        }
        let teachers: Vec<Tensor<f64>> =
            (0..2).map(|i| teacher_targets(&random(2, 6, 40 + i, 1.0), 0.04, &[0.0; 6]).unwrap()).collect();
        let r = grad_check(
            &store,
            |tape, s| {
                let v: Vec<Var> = (0..4).map(|i| tape.param(s, &format!("s{i}"))).collect::<Result<_, _>>()?;
                dino_global_loss(tape, &v, &teachers, 0.1)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn ibot_empty_mask_is_zero_and_single_position_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let z = ibot_masked_loss(&mut tape, None, &Tensor::zeros(&[0, 4]), 0.1).unwrap();
        assert_eq!(tape.scalar(z), 0.0);
        let s = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
        let t = Tensor::matrix(1, 4, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let l = ibot_masked_loss(&mut tape, Some(s), &t, 0.1).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ibot_matches_scalar_ce() {
        let s = random(5, 8, 50, 1.0);
        let t = teacher_targets(&random(5, 8, 51, 1.0), 0.05, &[0.0; 8]).unwrap();
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(s.clone()).unwrap();
        let l = ibot_masked_loss(&mut tape, Some(v), &t, 0.1).unwrap();
        let want: f64 = (0..5).map(|r| ce_ref(t.row_slice(r), s.row_slice(r), 0.1)).sum::<f64>() / 5.0;
        assert!((tape.scalar(l) - want).abs() < 1e-9);
    }

    fn koleo_of(x: Tensor<f64>) -> f64 {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x).unwrap();
        let k = koleo_regularizer(&mut tape, v).unwrap();
        tape.scalar(k)
    }

    #[test]
    fn koleo_closed_forms() {
        let same = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((koleo_of(same) + KOLEO_EPS.ln()).abs() < 1e-9);
        let orth = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((koleo_of(orth) + (2f64.sqrt() + KOLEO_EPS).ln()).abs() < 1e-12);
    }

    #[test]
    fn koleo_matches_quadratic_oracle() {
        let mut x = random(8, 5, 60, 1.0);
        for r in 0..8 {
            let n: f64 = x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let c = x.cols();
            x.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v /= n);
        }
        let mut want = 0.0;
        for i in 0..8 {
            let mut best = f64::INFINITY;
            for j in 0..8 {
                if i != j {
                    let d: f64 =
                        x.row_slice(i).iter().zip(x.row_slice(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    best = best.min(d);
                }
            }
            want -= (best + KOLEO_EPS).ln();
        }
        assert!((koleo_of(x) - want / 8.0).abs() < 1e-12);
    }

    #[test]
    fn koleo_needs_two_vectors() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(koleo_regularizer(&mut tape, v).is_err());
    }

    #[test]
    fn ema_endpoints_and_one_step() {
        let mut t = ParamStore::<f64>::new();
        t.insert("w", Tensor::row(vec![1.0]));
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::row(vec![0.0]));
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t.value("w").unwrap().data(), &[1.0]);
        ema_update(&mut t, &s, 0.9).unwrap();
        assert!((t.value("w").unwrap().data()[0] - 0.9).abs() < 1e-15);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.value("w").unwrap().data(), &[0.0]);
        let mut other = ParamStore::<f64>::new();
        other.insert("v", Tensor::row(vec![0.0]));
        assert!(ema_update(&mut other, &s, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn ema_distance_non_increasing(seed in 0u64..200, m in 0.0f64..1.0) {
            let mut t = ParamStore::<f64>::new();
            t.insert("a", random(3, 3, seed, 1.0));
            let mut s = ParamStore::<f64>::new();
            s.insert("a", random(3, 3, seed + 7, 1.0));
            let mut last = t.distance(&s).unwrap();
            for _ in 0..5 {
                ema_update(&mut t, &s, m).unwrap();
                let d = t.distance(&s).unwrap();
                prop_assert!(d <= last + 1e-15);
                last = d;
            }
        }
    }

    #[test]
    fn center_update_cases() {
        let l = random(4, 3, 70, 1.0);
        let mut c = vec![0.5, -0.5, 0.0];
        center_update(&mut c, &l, 1.0).unwrap();
        assert_eq!(c, vec![0.5, -0.5, 0.0]);
        let mean: Vec<f64> = (0..3).map(|j| (0..4).map(|i| l.get2(i, j)).sum::<f64>() / 4.0).collect();
        let mut c2 = mean.clone();
        center_update(&mut c2, &l, 0.9).unwrap();
        for (a, b) in c2.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-15);
        }
        center_update(&mut c, &l, 0.9).unwrap();
        let want = [0.9 * 0.5 + 0.1 * mean[0], 0.9 * -0.5 + 0.1 * mean[1], 0.1 * mean[2]];
        for (a, b) in c.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
