//! Direct loop implementations used as references.

pub fn beta_oracle(q: &[f64], k: &[f64], cr: usize, l: usize) -> Vec<f64> {
    let mut s = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            for c in 0..cr {
                s[i * l + j] += q[c * l + i] * k[c * l + j];
            }
        }
    }
    let mut beta = vec![0.0; l * l];
    for j in 0..l {
        let mut denom = 0.0;
        for i in 0..l {
            denom += s[i * l + j].exp();
        }
        for i in 0..l {
            beta[i * l + j] = s[i * l + j].exp() / denom;
        }
    }
    beta
}

pub fn apply_oracle(f: &[f64], beta: &[f64], v: &[f64], gamma: f64, c: usize, l: usize) -> Vec<f64> {
    let mut y = vec![0.0; c * l];
    for ch in 0..c {
        for j in 0..l {
            let mut o = 0.0;
            for i in 0..l {
                o += beta[i * l + j] * v[ch * l + i];
            }
            y[ch * l + j] = gamma * o + f[ch * l + j];
        }
    }
    y
}

pub fn project_oracle(w: &[f64], f: &[f64], co: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; co * l];
    for pix in 0..l {
        for o in 0..co {
            let mut acc = 0.0;
            for i in 0..c {
                acc += w[o * c + i] * f[i * l + pix];
            }
            out[o * l + pix] = acc;
        }
    }
    out
}

pub fn gap_oracle(y: &[f64], c: usize, l: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for j in 0..l {
                sum += y[ch * l + j];
                count += 1;
            }
            sum / count as f64
        })
        .collect()
}

/// 3×3 convolution, stride 2, padding 1, then ReLU, on one `[C, H, W]` map.
pub fn conv_relu_oracle(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    b: &[f64],
    cout: usize,
) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[o];
                for i in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (y, xx) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += wt[((o * cin + i) * 3 + ky) * 3 + kx] * x[(i * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc.max(0.0);
            }
        }
    }
    (out, ho, wo)
}

/// Per-class mean of the rows of `s` (`[rows, c]`).
pub fn prototypes_oracle(s: &[f64], labels: &[usize], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for class in 0..n {
        for ch in 0..c {
            let members: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] == class).map(|i| s[i * c + ch]).collect();
            out[class * c + ch] = members.iter().sum::<f64>() / members.len() as f64;
        }
    }
    out
}

/// Euclidean (or squared) distance between every row of `q` and of `p`.
pub fn distances_oracle(q: &[f64], p: &[f64], c: usize, squared: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for qi in q.chunks(c) {
        for pj in p.chunks(c) {
            let sq: f64 = qi.iter().zip(pj).map(|(a, b)| (a - b).powi(2)).sum();
            out.push(if squared { sq } else { sq.sqrt() });
        }
    }
    out
}

pub fn aggregate_oracle(dists: &[&[f64]], w: &[f64]) -> Vec<f64> {
    (0..dists[0].len()).map(|e| dists.iter().zip(w).map(|(d, wp)| wp * d[e]).sum()).collect()
}

/// Row-wise softmax of negative distances, `d` is `[rows, n]`.
pub fn posterior_oracle(d: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for row in d.chunks(n) {
        let z: f64 = row.iter().map(|x| (-x).exp()).sum();
        out.extend(row.iter().map(|x| (-x).exp() / z));
    }
    out
}
