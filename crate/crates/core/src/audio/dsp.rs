use std::f64::consts::PI;

/// O'Shaughnessy mel scale with the unrounded constant `1127 = 2595 / ln 10`.
pub fn hz_to_mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Triangular filters on the `fft_size / 2 + 1` bins, evenly spaced in mel
/// between `fmin` and `fmax`. Row `j` holds filter `j`'s weight per bin.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let n_bins = fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate / fft_size as f64;
    (0..n_mels)
        .map(|j| {
            let (left, center, right) = (edges[j], edges[j + 1], edges[j + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f >= left && f <= center && center > left {
                        (f - left) / (center - left)
                    } else if f > center && f <= right && right > center {
                        (right - f) / (right - center)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II matrix, row `k` is basis vector `k`.
pub fn dct_matrix(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            (0..n)
                .map(|i| scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

pub(crate) fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Shannon entropy (bits) of the split of `values` into `blocks` contiguous
/// chunks, each weighted by its share of the total.
pub(crate) fn block_entropy(values: &[f64], blocks: usize, floor: f64) -> f64 {
    let n = values.len();
    let total: f64 = values.iter().sum();
    let mut h = 0.0;
    for j in 0..blocks {
        let (a, b) = (j * n / blocks, (j + 1) * n / blocks);
        let share = values[a..b].iter().sum::<f64>() / (total + floor);
        if share > 0.0 {
            h -= share * (share + floor).log2();
        }
    }
    h.max(0.0)
}
