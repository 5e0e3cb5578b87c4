use super::{Result, Tensor, TensorError};

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(mismatch(op, format!("expected [C,H,W], got {s:?}"))),
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
    ))
}

pub fn scale(a: &Tensor, k: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * k).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g, _| vec![Some(g.iter().map(|v| v * k).collect())]),
    )
}

/// Elementwise product with a constant vector of the same length.
pub fn mul_const(a: &Tensor, factors: &[f64]) -> Result<Tensor> {
    if factors.len() != a.len() {
        return Err(mismatch("mul_const", format!("{} factors for {} values", factors.len(), a.len())));
    }
    let data = a.data().iter().zip(factors).map(|(x, k)| x * k).collect();
    let factors = factors.to_vec();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g, _| vec![Some(g.iter().zip(&factors).map(|(v, k)| v * k).collect())]),
    ))
}

/// Sum of all elements as a scalar.
pub fn sum(a: &Tensor) -> Tensor {
    let n = a.len();
    Tensor::from_op(
        vec![1],
        vec![a.data().iter().sum()],
        vec![a.clone()],
        Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
    )
}

/// `max(0, x)`; the subgradient at exactly 0 is 0.
pub fn relu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|&x| x.max(0.0)).collect();
    let input = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g, _| {
            let gi = g
                .iter()
                .zip(input.data())
                .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                .collect();
            vec![Some(gi)]
        }),
    )
}

/// `[C,H,W] -> [C]`, mean over each channel's cells.
pub fn global_avg_pool(a: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw("global_avg_pool", a)?;
    let hw = h * w;
    if hw == 0 {
        return Err(TensorError::EmptyOutput { op: "global_avg_pool", detail: "empty plane".into() });
    }
    let inv = 1.0 / hw as f64;
    let data = a.data().chunks_exact(hw).map(|p| p.iter().sum::<f64>() * inv).collect();
    Ok(Tensor::from_op(
        vec![c],
        data,
        vec![a.clone()],
        Box::new(move |g, _| {
            let mut gi = Vec::with_capacity(c * hw);
            for &gv in g {
                gi.extend(std::iter::repeat_n(gv * inv, hw));
            }
            vec![Some(gi)]
        }),
    ))
}

/// Affine map `W x + b` with `W: [M,N]`.
pub fn fully_connected(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = match *weights.shape() {
        [m, n] => (m, n),
        ref s => return Err(mismatch("fully_connected", format!("weights must be [M,N], got {s:?}"))),
    };
    if x.shape() != [n] {
        return Err(mismatch("fully_connected", format!("input {:?} vs weights [{m},{n}]", x.shape())));
    }
    if bias.shape() != [m] {
        return Err(mismatch("fully_connected", format!("bias {:?} vs weights [{m},{n}]", bias.shape())));
    }
    let (xd, wd, bd) = (x.data(), weights.data(), bias.data());
    let data = (0..m)
        .map(|i| bd[i] + wd[i * n..(i + 1) * n].iter().zip(xd).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let (xc, wc) = (x.clone(), weights.clone());
    Ok(Tensor::from_op(
        vec![m],
        data,
        vec![x.clone(), weights.clone(), bias.clone()],
        Box::new(move |g, needs| {
            let (xd, wd) = (xc.data(), wc.data());
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; n];
                for (i, &gi) in g.iter().enumerate() {
                    for (acc, w) in gx.iter_mut().zip(&wd[i * n..(i + 1) * n]) {
                        *acc += gi * w;
                    }
                }
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = Vec::with_capacity(m * n);
                for &gi in g {
                    gw.extend(xd.iter().map(|v| gi * v));
                }
                gw
            });
            vec![gx, gw, needs[2].then(|| g.to_vec())]
        }),
    ))
}

/// Source sample for one output line of an align-corners-false bilinear resize.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(src: usize, dst: usize, start: i64, count: usize) -> Vec<Option<Tap>> {
    let ratio = src as f64 / dst as f64;
    (0..count)
        .map(|i| {
            let pos = start + i as i64;
            if pos < 0 || pos >= dst as i64 {
                return None;
            }
            let s = ((pos as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { s - lo as f64 };
            Some(Tap { lo, hi, frac })
        })
        .collect()
}

/// Bilinear upsample `[C,H,W] -> [C,target_h,target_w]`, align-corners-false.
pub fn upsample_bilinear(a: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    upsample_bilinear_window(a, target_h, target_w, 0, 0, target_h, target_w)
}

/// The `[y0, y0+h) x [x0, x0+w)` window of `upsample_bilinear(a, target_h,
/// target_w)`, evaluated without materialising the full target. Cells outside
/// the target canvas are zero.
pub fn upsample_bilinear_window(
    a: &Tensor,
    target_h: usize,
    target_w: usize,
    y0: i64,
    x0: i64,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    const OP: &str = "upsample_bilinear";
    let (c, sh, sw) = chw(OP, a)?;
    if sh == 0 || sw == 0 || h == 0 || w == 0 {
        return Err(TensorError::EmptyOutput { op: OP, detail: format!("source {sh}x{sw}, window {h}x{w}") });
    }
    if target_h < sh || target_w < sw {
        return Err(TensorError::InvalidArgument {
            op: OP,
            detail: format!("downscaling {sh}x{sw} -> {target_h}x{target_w} is not supported"),
        });
    }
    let rows = taps(sh, target_h, y0, h);
    let cols = taps(sw, target_w, x0, w);
    let used: Vec<usize> = {
        let mut v: Vec<usize> = rows.iter().flatten().flat_map(|t| [t.lo, t.hi]).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    // position of each source row inside the horizontal-pass buffer
    let mut slot = vec![usize::MAX; sh];
    for (i, &r) in used.iter().enumerate() {
        slot[r] = i;
    }

    let src = a.data();
    let mut out = vec![0.0; c * h * w];
    let mut horiz = vec![0.0; used.len() * w];
    for ch in 0..c {
        let plane = &src[ch * sh * sw..(ch + 1) * sh * sw];
        for (i, &r) in used.iter().enumerate() {
            let line = &plane[r * sw..(r + 1) * sw];
            let dst = &mut horiz[i * w..(i + 1) * w];
            for (d, tap) in dst.iter_mut().zip(&cols) {
                *d = match tap {
                    Some(t) => line[t.lo] + t.frac * (line[t.hi] - line[t.lo]),
                    None => 0.0,
                };
            }
        }
        let oplane = &mut out[ch * h * w..(ch + 1) * h * w];
        for (y, tap) in rows.iter().enumerate() {
            let Some(t) = tap else { continue };
            let lo = &horiz[slot[t.lo] * w..(slot[t.lo] + 1) * w];
            let hi = &horiz[slot[t.hi] * w..(slot[t.hi] + 1) * w];
            let fy = t.frac;
            for ((o, l), u) in oplane[y * w..(y + 1) * w].iter_mut().zip(lo).zip(hi) {
                *o = l + fy * (u - l);
            }
        }
    }

    Ok(Tensor::from_op(
        vec![c, h, w],
        out,
        vec![a.clone()],
        Box::new(move |g, _| {
            let mut gi = vec![0.0; c * sh * sw];
            let mut ghoriz = vec![0.0; used.len() * w];
            for ch in 0..c {
                ghoriz.iter_mut().for_each(|v| *v = 0.0);
                let gplane = &g[ch * h * w..(ch + 1) * h * w];
                for (y, tap) in rows.iter().enumerate() {
                    let Some(t) = tap else { continue };
                    let gy = &gplane[y * w..(y + 1) * w];
                    let fy = t.frac;
                    let (slo, shi) = (slot[t.lo], slot[t.hi]);
                    for (x, &gv) in gy.iter().enumerate() {
                        ghoriz[slo * w + x] += gv * (1.0 - fy);
                        ghoriz[shi * w + x] += gv * fy;
                    }
                }
                let iplane = &mut gi[ch * sh * sw..(ch + 1) * sh * sw];
                for (i, &r) in used.iter().enumerate() {
                    let line = &mut iplane[r * sw..(r + 1) * sw];
                    for (gv, tap) in ghoriz[i * w..(i + 1) * w].iter().zip(&cols) {
                        if let Some(t) = tap {
                            line[t.lo] += gv * (1.0 - t.frac);
                            line[t.hi] += gv * t.frac;
                        }
                    }
                }
            }
            vec![Some(gi)]
        }),
    ))
}

/// Per-channel mean and centroid of a non-negative `[C,H,W]` map over a
/// `[2,H,W]` coordinate grid: `[mean_c..., cx_c..., cy_c...]` with
/// `cx_c = sum(f x) / (sum(f) + N eps)`. A silent channel has centroid 0.
pub fn centroid_pool(a: &Tensor, grid: &Tensor, eps: f64) -> Result<Tensor> {
    const OP: &str = "centroid_pool";
    let (c, h, w) = chw(OP, a)?;
    if grid.shape() != [2, h, w] {
        return Err(mismatch(OP, format!("grid {:?} for a {h}x{w} map", grid.shape())));
    }
    if !(eps > 0.0) {
        return Err(TensorError::InvalidArgument { op: OP, detail: format!("eps must be positive, got {eps}") });
    }
    let n = h * w;
    let (gx, gy) = grid.data().split_at(n);
    let (gx, gy) = (gx.to_vec(), gy.to_vec());
    let src = a.data();
    let mut out = vec![0.0; 3 * c];
    for ch in 0..c {
        let plane = &src[ch * n..(ch + 1) * n];
        let m = plane.iter().sum::<f64>() / n as f64;
        let sx = plane.iter().zip(&gx).map(|(f, x)| f * x).sum::<f64>() / n as f64;
        let sy = plane.iter().zip(&gy).map(|(f, y)| f * y).sum::<f64>() / n as f64;
        out[ch] = m;
        out[c + ch] = sx / (m + eps);
        out[2 * c + ch] = sy / (m + eps);
    }
    let stats = out.clone();
    Ok(Tensor::from_op(
        vec![3 * c],
        out,
        vec![a.clone()],
        Box::new(move |g, _| {
            let mut gi = vec![0.0; c * n];
            for ch in 0..c {
                let (m, cx, cy) = (stats[ch], stats[c + ch], stats[2 * c + ch]);
                let k = 1.0 / (n as f64 * (m + eps));
                let (gm, gcx, gcy) = (g[ch] / n as f64, g[c + ch] * k, g[2 * c + ch] * k);
                for (p, d) in gi[ch * n..(ch + 1) * n].iter_mut().enumerate() {
                    *d = gm + gcx * (gx[p] - cx) + gcy * (gy[p] - cy);
                }
            }
            vec![Some(gi)]
        }),
    ))
}

/// Sparse row of a separable resampling map: weights over source indices
/// `start..start + weights.len()`.
#[derive(Clone)]
struct Band {
    start: usize,
    weights: Vec<f64>,
}

/// Mean of `k` consecutive output lines of a resize, as one band.
fn pooled_bands(lines: &[Option<Tap>], src: usize, k: usize) -> Vec<Band> {
    lines
        .chunks_exact(k)
        .map(|cell| {
            let mut dense = vec![0.0; src];
            for t in cell.iter().flatten() {
                dense[t.lo] += (1.0 - t.frac) / k as f64;
                dense[t.hi] += t.frac / k as f64;
            }
            band_from_dense(&dense)
        })
        .collect()
}

fn band_from_dense(dense: &[f64]) -> Band {
    match (dense.iter().position(|v| *v != 0.0), dense.iter().rposition(|v| *v != 0.0)) {
        (Some(a), Some(b)) => Band { start: a, weights: dense[a..=b].to_vec() },
        _ => Band { start: 0, weights: Vec::new() },
    }
}

fn dot_band(b: &Band, line: &[f64]) -> f64 {
    b.weights.iter().zip(&line[b.start..]).map(|(w, v)| w * v).sum()
}

/// `out[c] = R_y a[c] R_x^T` for banded `R_y`, `R_x`.
fn separable(a: &Tensor, rows: Vec<Band>, cols: Vec<Band>) -> Result<Tensor> {
    let (c, sh, sw) = chw("separable", a)?;
    let (h, w) = (rows.len(), cols.len());
    let mut used: Vec<usize> = rows.iter().flat_map(|b| b.start..b.start + b.weights.len()).collect();
    used.sort_unstable();
    used.dedup();
    let mut slot = vec![usize::MAX; sh];
    for (i, &r) in used.iter().enumerate() {
        slot[r] = i;
    }
    let src = a.data();
    let mut out = vec![0.0; c * h * w];
    let mut horiz = vec![0.0; used.len() * w];
    for ch in 0..c {
        let plane = &src[ch * sh * sw..(ch + 1) * sh * sw];
        for (i, &r) in used.iter().enumerate() {
            let line = &plane[r * sw..(r + 1) * sw];
            for (d, b) in horiz[i * w..(i + 1) * w].iter_mut().zip(&cols) {
                *d = dot_band(b, line);
            }
        }
        let oplane = &mut out[ch * h * w..(ch + 1) * h * w];
        for (y, b) in rows.iter().enumerate() {
            let orow = &mut oplane[y * w..(y + 1) * w];
            for (k, wy) in b.weights.iter().enumerate() {
                let hrow = &horiz[slot[b.start + k] * w..][..w];
                orow.iter_mut().zip(hrow).for_each(|(o, v)| *o += wy * v);
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, h, w],
        out,
        vec![a.clone()],
        Box::new(move |g, _| {
            let mut gi = vec![0.0; c * sh * sw];
            let mut ghoriz = vec![0.0; used.len() * w];
            for ch in 0..c {
                ghoriz.iter_mut().for_each(|v| *v = 0.0);
                let gplane = &g[ch * h * w..(ch + 1) * h * w];
                for (y, b) in rows.iter().enumerate() {
                    let grow = &gplane[y * w..(y + 1) * w];
                    for (k, wy) in b.weights.iter().enumerate() {
                        let hrow = &mut ghoriz[slot[b.start + k] * w..][..w];
                        hrow.iter_mut().zip(grow).for_each(|(o, v)| *o += wy * v);
                    }
                }
                let iplane = &mut gi[ch * sh * sw..(ch + 1) * sh * sw];
                for (i, &r) in used.iter().enumerate() {
                    let line = &mut iplane[r * sw..(r + 1) * sw];
                    for (gv, b) in ghoriz[i * w..(i + 1) * w].iter().zip(&cols) {
                        for (d, wx) in line[b.start..].iter_mut().zip(&b.weights) {
                            *d += gv * wx;
                        }
                    }
                }
            }
            vec![Some(gi)]
        }),
    ))
}

fn check_pool(op: &'static str, h: usize, w: usize, k: usize) -> Result<()> {
    if k == 0 || h == 0 || w == 0 || h % k != 0 || w % k != 0 {
        return Err(TensorError::InvalidArgument { op, detail: format!("window {h}x{w} not divisible by {k}") });
    }
    Ok(())
}

/// `avg_pool2d(upsample_bilinear_window(a, ..), k)` in one pass.
#[allow(clippy::too_many_arguments)]
pub fn upsample_bilinear_window_pooled(
    a: &Tensor,
    target_h: usize,
    target_w: usize,
    y0: i64,
    x0: i64,
    h: usize,
    w: usize,
    k: usize,
) -> Result<Tensor> {
    const OP: &str = "upsample_bilinear_window_pooled";
    let (_, sh, sw) = chw(OP, a)?;
    check_pool(OP, h, w, k)?;
    if sh == 0 || sw == 0 || target_h < sh || target_w < sw {
        return Err(TensorError::InvalidArgument { op: OP, detail: format!("cannot upsample {sh}x{sw} -> {target_h}x{target_w}") });
    }
    let rows = pooled_bands(&taps(sh, target_h, y0, h), sh, k);
    let cols = pooled_bands(&taps(sw, target_w, x0, w), sw, k);
    separable(a, rows, cols)
}

/// `avg_pool2d(crop_window(a, ..), k)` in one pass.
pub fn crop_window_pooled(a: &Tensor, y0: i64, x0: i64, h: usize, w: usize, k: usize) -> Result<Tensor> {
    const OP: &str = "crop_window_pooled";
    let (_, sh, sw) = chw(OP, a)?;
    check_pool(OP, h, w, k)?;
    let bands = |start: i64, count: usize, src: usize| -> Vec<Band> {
        (0..count / k)
            .map(|cell| {
                let mut dense = vec![0.0; src];
                for i in 0..k {
                    let pos = start + (cell * k + i) as i64;
                    if (0..src as i64).contains(&pos) {
                        dense[pos as usize] += 1.0 / k as f64;
                    }
                }
                band_from_dense(&dense)
            })
            .collect()
    };
    separable(a, bands(y0, h, sh), bands(x0, w, sw))
}

/// Stack `a` then `b` along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = chw("concat_channels", a)?;
    let (cb, hb, wb) = chw("concat_channels", b)?;
    if (ha, wa) != (hb, wb) {
        return Err(mismatch("concat_channels", format!("spatial {ha}x{wa} vs {hb}x{wb}")));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    let split = a.len();
    Ok(Tensor::from_op(
        vec![ca + cb, ha, wa],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            vec![needs[0].then(|| g[..split].to_vec()), needs[1].then(|| g[split..].to_vec())]
        }),
    ))
}

/// Flattening concatenation of any tensors into one vector.
pub fn concat(parts: &[&Tensor]) -> Tensor {
    let total: usize = parts.iter().map(|t| t.len()).sum();
    let mut data = Vec::with_capacity(total);
    let mut bounds = Vec::with_capacity(parts.len());
    for t in parts {
        let start = data.len();
        data.extend_from_slice(t.data());
        bounds.push((start, data.len()));
    }
    Tensor::from_op(
        vec![total],
        data,
        parts.iter().map(|t| (*t).clone()).collect(),
        Box::new(move |g, needs| {
            bounds
                .iter()
                .zip(needs)
                .map(|(&(s, e), &n)| n.then(|| g[s..e].to_vec()))
                .collect()
        }),
    )
}

/// `[C,H,W] -> [C,h,w]` window with top-left at `(y0, x0)`; cells outside the
/// source read as zero.
pub fn crop_window(a: &Tensor, y0: i64, x0: i64, h: usize, w: usize) -> Result<Tensor> {
    let (c, sh, sw) = chw("crop_window", a)?;
    if h == 0 || w == 0 {
        return Err(TensorError::EmptyOutput { op: "crop_window", detail: format!("{h}x{w}") });
    }
    // valid output ranges
    let ys = (0.max(-y0) as usize).min(h)..((sh as i64 - y0).clamp(0, h as i64) as usize);
    let xs = (0.max(-x0) as usize).min(w)..((sw as i64 - x0).clamp(0, w as i64) as usize);
    let src = a.data();
    let mut out = vec![0.0; c * h * w];
    if !ys.is_empty() && !xs.is_empty() {
        for ch in 0..c {
            for y in ys.clone() {
                let sy = (y as i64 + y0) as usize;
                let sx = (xs.start as i64 + x0) as usize;
                let srow = &src[(ch * sh + sy) * sw + sx..][..xs.len()];
                out[(ch * h + y) * w + xs.start..][..xs.len()].copy_from_slice(srow);
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, h, w],
        out,
        vec![a.clone()],
        Box::new(move |g, _| {
            let mut gi = vec![0.0; c * sh * sw];
            if !ys.is_empty() && !xs.is_empty() {
                for ch in 0..c {
                    for y in ys.clone() {
                        let sy = (y as i64 + y0) as usize;
                        let sx = (xs.start as i64 + x0) as usize;
                        let dst = &mut gi[(ch * sh + sy) * sw + sx..][..xs.len()];
                        for (d, v) in dst.iter_mut().zip(&g[(ch * h + y) * w + xs.start..][..xs.len()]) {
                            *d += v;
                        }
                    }
                }
            }
            vec![Some(gi)]
        }),
    ))
}

/// Non-overlapping `k x k` mean pooling; extents must be divisible by `k`.
pub fn avg_pool2d(a: &Tensor, k: usize) -> Result<Tensor> {
    let (c, h, w) = chw("avg_pool2d", a)?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(TensorError::InvalidArgument {
            op: "avg_pool2d",
            detail: format!("{h}x{w} not divisible by window {k}"),
        });
    }
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let src = a.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            let orow = &mut out[(ch * oh + y / k) * ow..][..ow];
            let srow = &src[(ch * h + y) * w..][..w];
            for (o, cell) in orow.iter_mut().zip(srow.chunks_exact(k)) {
                *o += cell.iter().sum::<f64>();
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_op(
        vec![c, oh, ow],
        out,
        vec![a.clone()],
        Box::new(move |g, _| {
            let mut gi = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    let grow = &g[(ch * oh + y / k) * ow..][..ow];
                    let irow = &mut gi[(ch * h + y) * w..][..w];
                    for (cell, gv) in irow.chunks_exact_mut(k).zip(grow) {
                        cell.iter_mut().for_each(|v| *v = gv * inv);
                    }
                }
            }
            vec![Some(gi)]
        }),
    ))
}

/// Mean squared error against a constant target, averaged over every element.
pub fn mse(pred: &Tensor, target: &[f64]) -> Result<Tensor> {
    if pred.len() != target.len() {
        return Err(mismatch("mse", format!("prediction has {} values, target {}", pred.len(), target.len())));
    }
    let n = target.len().max(1) as f64;
    let residual: Vec<f64> = pred.data().iter().zip(target).map(|(p, t)| p - t).collect();
    let value = residual.iter().map(|r| r * r).sum::<f64>() / n;
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![pred.clone()],
        Box::new(move |g, _| vec![Some(residual.iter().map(|r| 2.0 * r * g[0] / n).collect())]),
    ))
}

/// `sum_t sum_i t_i^2` as a scalar.
pub fn sum_squares(parts: &[&Tensor]) -> Tensor {
    let value = parts.iter().flat_map(|t| t.data()).map(|v| v * v).sum();
    let inputs: Vec<Tensor> = parts.iter().map(|t| (*t).clone()).collect();
    let captured = inputs.clone();
    Tensor::from_op(
        vec![1],
        vec![value],
        inputs,
        Box::new(move |g, needs| {
            captured
                .iter()
                .zip(needs)
                .map(|(t, &n)| n.then(|| t.data().iter().map(|v| 2.0 * v * g[0]).collect()))
                .collect()
        }),
    )
}

/// `sqrt(sum_t sum_i t_i^2)` as a scalar; the gradient at 0 is taken as 0.
pub fn l2_norm(parts: &[&Tensor]) -> Tensor {
    let value = parts.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    let inputs: Vec<Tensor> = parts.iter().map(|t| (*t).clone()).collect();
    let captured = inputs.clone();
    Tensor::from_op(
        vec![1],
        vec![value],
        inputs,
        Box::new(move |g, needs| {
            let k = if value > 0.0 { g[0] / value } else { 0.0 };
            captured.iter().zip(needs).map(|(t, &n)| n.then(|| t.data().iter().map(|v| v * k).collect())).collect()
        }),
    )
}

/// `sum_k w_k s_k` over scalar tensors.
pub fn weighted_sum(terms: &[(f64, &Tensor)]) -> Result<Tensor> {
    if let Some((_, t)) = terms.iter().find(|(_, t)| t.len() != 1) {
        return Err(mismatch("weighted_sum", format!("non-scalar term of shape {:?}", t.shape())));
    }
    let value = terms.iter().map(|(w, t)| w * t.item()).sum();
    let weights: Vec<f64> = terms.iter().map(|(w, _)| *w).collect();
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        terms.iter().map(|(_, t)| (*t).clone()).collect(),
        Box::new(move |g, needs| {
            weights.iter().zip(needs).map(|(w, &n)| n.then(|| vec![w * g[0]])).collect()
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn relu_definition() {
        let out = relu(&t(&[3], vec![-1.0, 0.0, 2.0]));
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
        let neg = relu(&t(&[4], vec![-1.0, -0.5, -3.0, -1e-9]));
        assert!(neg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_subgradient_zero_at_origin() {
        let p = Tensor::leaf(&[3], vec![-1.0, 0.0, 2.0], true).unwrap();
        let loss = weighted_sum(&[(1.0, &sum_squares(&[&relu(&p)]))]).unwrap();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![0.0, 0.0, 4.0]);
    }

    #[test]
    fn gap_values() {
        let c = global_avg_pool(&t(&[2, 2, 2], vec![1.0, 3.0, 5.0, 7.0, 2.5, 2.5, 2.5, 2.5])).unwrap();
        assert_eq!(c.data(), &[4.0, 2.5]);
    }

    #[test]
    fn gap_gradient_is_uniform() {
        let p = Tensor::leaf(&[1, 2, 3], vec![0.3; 6], true).unwrap();
        let out = global_avg_pool(&p).unwrap();
        weighted_sum(&[(1.0, &out)]).unwrap().backward().unwrap();
        for g in p.grad().unwrap() {
            assert!((g - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fc_identity_and_zero_input() {
        let x = t(&[3], vec![1.0, -2.0, 0.5]);
        let eye = t(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let zero_b = t(&[3], vec![0.0; 3]);
        assert_eq!(fully_connected(&x, &eye, &zero_b).unwrap().data(), x.data());
        let b = t(&[3], vec![0.1, 0.2, 0.3]);
        let out = fully_connected(&Tensor::zeros(&[3]), &eye, &b).unwrap();
        assert_eq!(out.data(), b.data());
        assert!(fully_connected(&t(&[2], vec![0.0; 2]), &eye, &b).is_err());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let a = t(&[2, 3, 2], vec![1.25; 12]);
        let up = upsample_bilinear(&a, 7, 5).unwrap();
        assert!(up.data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn upsample_row_samples() {
        let a = t(&[1, 1, 2], vec![0.0, 2.0]);
        // 2x: sample positions at 0.25-source-pixel offsets around the pair
        let up = upsample_bilinear(&a, 1, 4).unwrap();
        assert_eq!(up.data(), &[0.0, 0.5, 1.5, 2.0]);
        // three samples: the middle one falls on the midpoint
        let up = upsample_bilinear(&a, 1, 3).unwrap();
        assert_eq!(up.data()[1], 1.0);
    }

    #[test]
    fn upsample_rejects_downscale() {
        let a = t(&[1, 4, 4], vec![0.0; 16]);
        assert!(matches!(upsample_bilinear(&a, 2, 4), Err(TensorError::InvalidArgument { .. })));
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn pooled_window_ops_match_composition() {
        let data: Vec<f64> = (0..3 * 4 * 6).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        for (y0, x0) in [(-5i64, 3i64), (0, 0), (9, 17), (-20, -20)] {
            let a = Tensor::leaf(&[3, 4, 6], data.clone(), true).unwrap();
            let fused = upsample_bilinear_window_pooled(&a, 16, 24, y0, x0, 12, 8, 4).unwrap();
            let composed = avg_pool2d(&upsample_bilinear_window(&a, 16, 24, y0, x0, 12, 8).unwrap(), 4).unwrap();
            assert!(close(fused.data(), composed.data()));
            let r: Vec<f64> = (0..fused.len()).map(|i| (i as f64 * 0.7).sin()).collect();
            sum(&mul_const(&fused, &r).unwrap()).backward().unwrap();
            let g1 = a.grad().unwrap();
            a.zero_grad();
            sum(&mul_const(&composed, &r).unwrap()).backward().unwrap();
            assert!(close(&g1, &a.grad().unwrap()));

            let a = Tensor::leaf(&[3, 4, 6], data.clone(), true).unwrap();
            let fused = crop_window_pooled(&a, y0 / 4, x0 / 4, 4, 6, 2).unwrap();
            let composed = avg_pool2d(&crop_window(&a, y0 / 4, x0 / 4, 4, 6).unwrap(), 2).unwrap();
            assert!(close(fused.data(), composed.data()));
            let r: Vec<f64> = (0..fused.len()).map(|i| (i as f64 * 1.3).cos()).collect();
            sum(&mul_const(&fused, &r).unwrap()).backward().unwrap();
            let g1 = a.grad().unwrap();
            a.zero_grad();
            sum(&mul_const(&composed, &r).unwrap()).backward().unwrap();
            assert!(close(&g1, &a.grad().unwrap()));
        }
        let a = t(&[1, 4, 4], vec![0.0; 16]);
        assert!(crop_window_pooled(&a, 0, 0, 3, 4, 2).is_err());
    }

    #[test]
    fn centroid_of_a_point_mass() {
        let mut f = vec![0.0; 2 * 3 * 4];
        f[4 + 2] = 2.0;
        let grid: Vec<f64> = (0..12).map(|i| (i % 4) as f64).chain((0..12).map(|i| (i / 4) as f64)).collect();
        let out = centroid_pool(&t(&[2, 3, 4], f), &t(&[2, 3, 4], grid), 1e-12).unwrap();
        let d = out.data();
        assert!((d[0] - 2.0 / 12.0).abs() < 1e-15 && d[1] == 0.0);
        assert!((d[2] - 2.0).abs() < 1e-9 && (d[4] - 1.0).abs() < 1e-9);
        assert_eq!((d[3], d[5]), (0.0, 0.0));
    }

    #[test]
    fn window_matches_full_upsample() {
        let data: Vec<f64> = (0..2 * 4 * 6).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let a = t(&[2, 4, 6], data);
        let full = upsample_bilinear(&a, 16, 24).unwrap();
        let (y0, x0, h, w) = (-3i64, 5i64, 10usize, 22usize);
        let win = upsample_bilinear_window(&a, 16, 24, y0, x0, h, w).unwrap();
        let cropped = crop_window(&full, y0, x0, h, w).unwrap();
        assert_eq!(win.data(), cropped.data());
    }

    #[test]
    fn concat_channels_contract() {
        let a = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), &[2, 2, 2]);
        assert_eq!(ab.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let empty = t(&[0, 2, 2], vec![]);
        assert_eq!(concat_channels(&a, &empty).unwrap().data(), a.data());
        assert!(concat_channels(&a, &t(&[1, 1, 4], vec![0.0; 4])).is_err());
    }

    #[test]
    fn crop_pads_with_zeros() {
        let a = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = crop_window(&a, -1, -1, 2, 2).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0, 0.0, 1.0]);
        let far = crop_window(&a, 10, 10, 2, 2).unwrap();
        assert!(far.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn avg_pool_means() {
        let a = t(&[1, 2, 4], vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 4.0, 8.0]);
        assert_eq!(avg_pool2d(&a, 2).unwrap().data(), &[4.0, 3.0]);
        assert!(avg_pool2d(&a, 3).is_err());
    }

    #[test]
    fn mse_constant_error() {
        let p = t(&[64], vec![2.0; 64]);
        assert_eq!(mse(&p, &[0.0; 64]).unwrap().item(), 4.0);
        assert_eq!(mse(&p, &[2.0; 64]).unwrap().item(), 0.0);
        assert!(mse(&p, &[0.0; 63]).is_err());
    }
}
