/// Fixed sinusoidal position table, `len x d` row-major, `d` even.
///
/// Even columns carry `sin(pos / 10000^(2i/d))`, odd columns the matching
/// cosine. Two independent tables are built from this: one over frame
/// positions, one over query slots.
pub fn sinusoidal_table(len: usize, d: usize) -> Vec<f64> {
    debug_assert!(d % 2 == 0);
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            out[pos * d + 2 * i] = angle.sin();
            out[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_is_sin0_cos0_pattern() {
        let t = sinusoidal_table(3, 6);
        for i in 0..3 {
            assert_eq!(t[2 * i], 0.0);
            assert_eq!(t[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn values_bounded_and_rows_distinct() {
        let d = 16;
        let t = sinusoidal_table(64, d);
        assert!(t.iter().all(|v| v.abs() <= 1.0));
        for p in 1..64 {
            let a = &t[(p - 1) * d..p * d];
            let b = &t[p * d..(p + 1) * d];
            assert!(a != b, "rows {p} and {} identical", p - 1);
        }
    }

    #[test]
    fn matches_direct_formula() {
        let d = 8;
        let t = sinusoidal_table(10, d);
        let pos = 7usize;
        let i = 2usize;
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        assert!((t[pos * d + 2 * i] - angle.sin()).abs() < 1e-15);
        assert!((t[pos * d + 2 * i + 1] - angle.cos()).abs() < 1e-15);
    }
}
