use crate::error::{shape_err, Result};
use crate::nn::tensor::gemm;
use crate::nn::{Backward, Graph, Tensor, Var};

/// Geometry of a 2-D convolution over `[batch, panels, height, width]`.
///
/// Width is the time axis. `pad_w = (dilation_w * (kernel_w - 1), 0)` gives
/// a causal convolution: output column `t` only reads input columns `<= t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub pad_h: (usize, usize),
    pub pad_w: (usize, usize),
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            dilation: (1, 1),
            pad_h: (0, 0),
            pad_w: (0, 0),
        }
    }
}

impl Conv2dSpec {
    /// No height padding, causal padding on the time axis.
    pub fn causal(kernel_w: usize, stride: (usize, usize), dilation: (usize, usize)) -> Self {
        Conv2dSpec {
            stride,
            dilation,
            pad_h: (0, 0),
            pad_w: (dilation.1 * (kernel_w - 1), 0),
        }
    }

    /// Output `(height, width)`, or an error when the kernel does not fit.
    pub fn output_hw(&self, in_hw: (usize, usize), kernel: (usize, usize)) -> Result<(usize, usize)> {
        let dim = |len: usize, pad: (usize, usize), k: usize, s: usize, d: usize, axis: &str| {
            let padded = len + pad.0 + pad.1;
            let span = d * (k - 1) + 1;
            if k == 0 || s == 0 || d == 0 {
                return shape_err(format!("{axis}: kernel, stride and dilation must be >= 1"));
            }
            if padded < span {
                return shape_err(format!(
                    "{axis}: kernel span {span} exceeds padded input {padded}"
                ));
            }
            Ok((padded - span) / s + 1)
        };
        Ok((
            dim(in_hw.0, self.pad_h, kernel.0, self.stride.0, self.dilation.0, "height")?,
            dim(in_hw.1, self.pad_w, kernel.1, self.stride.1, self.dilation.1, "width")?,
        ))
    }
}

struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one batch item into a `[cin*kh*kw, oh*ow]` patch matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let s = &self.spec;
        let ncol = self.cols();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..self.oh {
                        let iy = (oy * s.stride.0 + i * s.dilation.0) as isize - s.pad_h.0 as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s.stride.1 + j * s.dilation.1) as isize - s.pad_w.0 as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Patch matrix `[cin*kw, oh*ow]` of kernel row `i` alone.
    fn im2col_row(&self, x: &[f64], i: usize, cols: &mut [f64]) {
        let s = &self.spec;
        let ncol = self.cols();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for j in 0..self.kw {
                let dst = &mut cols[(ci * self.kw + j) * ncol..(ci * self.kw + j + 1) * ncol];
                for oy in 0..self.oh {
                    let iy = (oy * s.stride.0 + i * s.dilation.0) as isize - s.pad_h.0 as isize;
                    let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                    if iy < 0 || iy >= self.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s.stride.1 + j * s.dilation.1) as isize - s.pad_w.0 as isize;
                        *o = if ix < 0 || ix >= self.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters patch gradients back.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let s = &self.spec;
        let ncol = self.cols();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * self.kh + i) * self.kw + j;
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..self.oh {
                        let iy = (oy * s.stride.0 + i * s.dilation.0) as isize - s.pad_h.0 as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * s.stride.1 + j * s.dilation.1) as isize - s.pad_w.0 as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    geo: Geometry,
    has_bias: bool,
}

impl Backward for Conv2dOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geo;
        let (x, w) = (inputs[0], inputs[1]);
        let (rows, ncol) = (g.rows(), g.cols());
        let in_sz = g.cin * g.h * g.w;
        let out_sz = g.cout * ncol;
        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
        let mut cols = vec![0.0; rows * ncol];
        let mut dcols = vec![0.0; rows * ncol];
        for b in 0..g.batch {
            let gout = &grad.data()[b * out_sz..(b + 1) * out_sz];
            if let Some(dw) = dw.as_mut() {
                g.im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &mut cols);
                // dW[cout, rows] += dOut[cout, ncol] * cols^T
                gemm(g.cout, ncol, rows, gout, false, &cols, true, dw.data_mut(), 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                // dcols[rows, ncol] = W^T[rows, cout] * dOut[cout, ncol]
                gemm(rows, g.cout, ncol, w.data(), true, gout, false, &mut dcols, 0.0);
                g.col2im(&dcols, &mut dx.data_mut()[b * in_sz..(b + 1) * in_sz]);
            }
        }
        let mut result = vec![dx, dw];
        if self.has_bias {
            result.push(needs[2].then(|| {
                let mut db = vec![0.0; g.cout];
                for b in 0..g.batch {
                    for (co, d) in db.iter_mut().enumerate() {
                        let base = b * out_sz + co * ncol;
                        *d += grad.data()[base..base + ncol].iter().sum::<f64>();
                    }
                }
                Tensor::new(&[g.cout], db).expect("bias shape")
            }));
        }
        Ok(result)
    }
}

/// 2-D convolution. `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
pub fn conv2d(g: &mut Graph, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    if xs.len() != 4 || ws.len() != 4 {
        return shape_err(format!("conv2d expects 4-D input and kernel, got {xs:?} and {ws:?}"));
    }
    if xs[1] != ws[1] {
        return shape_err(format!(
            "conv2d input has {} panels but kernel expects {}",
            xs[1], ws[1]
        ));
    }
    if let Some(b) = bias {
        if g.shape(b) != [ws[0]] {
            return shape_err(format!("conv2d bias must have shape [{}]", ws[0]));
        }
    }
    let (oh, ow) = spec.output_hw((xs[2], xs[3]), (ws[2], ws[3]))?;
    let geo = Geometry {
        batch: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
        oh,
        ow,
        spec,
    };
    let (rows, ncol) = (geo.rows(), geo.cols());
    let in_sz = geo.cin * geo.h * geo.w;
    let out_sz = geo.cout * ncol;
    let mut out = vec![0.0; geo.batch * out_sz];
    {
        let xv = g.value(x).data();
        let wv = g.value(w).data();
        let bv = bias.map(|b| g.value(b).data());
        // Each kernel row is reduced on its own and the row results are
        // summed afterwards, so rows with opposite weights over identical
        // inputs cancel exactly.
        let (kh, kw, cin) = (geo.kh, geo.kw, geo.cin);
        let rk = cin * kw;
        let row_weights: Vec<Vec<f64>> = (0..kh)
            .map(|i| {
                let mut wi = Vec::with_capacity(geo.cout * rk);
                for co in 0..geo.cout {
                    for ci in 0..cin {
                        let base = ((co * cin + ci) * kh + i) * kw;
                        wi.extend_from_slice(&wv[base..base + kw]);
                    }
                }
                wi
            })
            .collect();
        let mut cols = vec![0.0; if kh == 1 { rows * ncol } else { rk * ncol }];
        let mut part = vec![0.0; if kh == 1 { 0 } else { out_sz }];
        for b in 0..geo.batch {
            let xb = &xv[b * in_sz..(b + 1) * in_sz];
            let o = &mut out[b * out_sz..(b + 1) * out_sz];
            if kh == 1 {
                geo.im2col(xb, &mut cols);
                gemm(geo.cout, rows, ncol, wv, false, &cols, false, o, 0.0);
            } else {
                for (i, wi) in row_weights.iter().enumerate() {
                    geo.im2col_row(xb, i, &mut cols);
                    let dst: &mut [f64] = if i == 0 { o } else { &mut part };
                    gemm(geo.cout, rk, ncol, wi, false, &cols, false, dst, 0.0);
                    if i > 0 {
                        o.iter_mut().zip(&part).for_each(|(a, p)| *a += p);
                    }
                }
            }
            if let Some(bv) = bv {
                for (co, &bc) in bv.iter().enumerate() {
                    o[co * ncol..(co + 1) * ncol].iter_mut().for_each(|v| *v += bc);
                }
            }
        }
    }
    let out = Tensor::new(&[geo.batch, geo.cout, oh, ow], out)?;
    let mut inputs = vec![x, w];
    inputs.extend(bias);
    Ok(g.apply(
        Box::new(Conv2dOp {
            geo,
            has_bias: bias.is_some(),
        }),
        &inputs,
        out,
    ))
}

struct PointwiseOp {
    batch: usize,
    cin: usize,
    cout: usize,
    t: usize,
    has_bias: bool,
}

impl Backward for PointwiseOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (cin, cout, t) = (self.cin, self.cout, self.t);
        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
        for b in 0..self.batch {
            let gout = &grad.data()[b * cout * t..(b + 1) * cout * t];
            if let Some(dw) = dw.as_mut() {
                gemm(cout, t, cin, gout, false, &x.data()[b * cin * t..(b + 1) * cin * t], true, dw.data_mut(), 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(cin, cout, t, w.data(), true, gout, false, &mut dx.data_mut()[b * cin * t..(b + 1) * cin * t], 0.0);
            }
        }
        let mut res = vec![dx, dw];
        if self.has_bias {
            res.push(needs[2].then(|| {
                let mut db = vec![0.0; cout];
                for b in 0..self.batch {
                    for (co, d) in db.iter_mut().enumerate() {
                        let base = (b * cout + co) * t;
                        *d += grad.data()[base..base + t].iter().sum::<f64>();
                    }
                }
                Tensor::new(&[cout], db).expect("bias shape")
            }));
        }
        Ok(res)
    }
}

/// Pointwise (kernel size 1) 1-D convolution: `x: [B, Cin, T]`, `w: [Cout, Cin]`.
pub fn pointwise(g: &mut Graph, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    if xs.len() != 3 || ws.len() != 2 || xs[1] != ws[1] {
        return shape_err(format!("pointwise conv: input {xs:?} incompatible with weight {ws:?}"));
    }
    if let Some(b) = bias {
        if g.shape(b) != [ws[0]] {
            return shape_err("pointwise conv: bias length must equal output channels");
        }
    }
    let (batch, cin, t, cout) = (xs[0], xs[1], xs[2], ws[0]);
    let mut out = vec![0.0; batch * cout * t];
    {
        let xv = g.value(x).data();
        let wv = g.value(w).data();
        for b in 0..batch {
            let o = &mut out[b * cout * t..(b + 1) * cout * t];
            gemm(cout, cin, t, wv, false, &xv[b * cin * t..(b + 1) * cin * t], false, o, 0.0);
            if let Some(bias) = bias {
                for (co, &bc) in g.value(bias).data().iter().enumerate() {
                    o[co * t..(co + 1) * t].iter_mut().for_each(|v| *v += bc);
                }
            }
        }
    }
    let out = Tensor::new(&[batch, cout, t], out)?;
    let mut inputs = vec![x, w];
    inputs.extend(bias);
    Ok(g.apply(
        Box::new(PointwiseOp {
            batch,
            cin,
            cout,
            t,
            has_bias: bias.is_some(),
        }),
        &inputs,
        out,
    ))
}

struct DepthwiseOp {
    batch: usize,
    channels: usize,
    t: usize,
    kernel: usize,
    dilation: usize,
}

impl DepthwiseOp {
    /// Input frame read by tap `p` for output frame `t`, if any.
    fn src(&self, t: usize, p: usize) -> Option<usize> {
        let back = self.dilation * (self.kernel - 1 - p);
        t.checked_sub(back)
    }
}

impl Backward for DepthwiseOp {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (c, t, k) = (self.channels, self.t, self.kernel);
        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
        let mut db = needs[2].then(|| Tensor::zeros(&[c]));
        for b in 0..self.batch {
            for ch in 0..c {
                let base = (b * c + ch) * t;
                let go = &grad.data()[base..base + t];
                if let Some(db) = db.as_mut() {
                    db.data_mut()[ch] += go.iter().sum::<f64>();
                }
                for p in 0..k {
                    let wv = w.data()[ch * k + p];
                    let mut acc = 0.0;
                    for ti in 0..t {
                        if let Some(s) = self.src(ti, p) {
                            acc += go[ti] * x.data()[base + s];
                            if let Some(dx) = dx.as_mut() {
                                dx.data_mut()[base + s] += go[ti] * wv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw.data_mut()[ch * k + p] += acc;
                    }
                }
            }
        }
        Ok(vec![dx, dw, db])
    }
}

/// Causal dilated depthwise 1-D convolution: `x: [B, C, T]`, `w: [C, P]`, `b: [C]`.
///
/// `y[c, t] = b[c] + sum_p w[c, p] * x[c, t - d * (P - 1 - p)]`.
pub fn depthwise_causal(g: &mut Graph, x: Var, w: Var, bias: Var, dilation: usize) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[1] || g.shape(bias) != [xs[1]] || dilation == 0 {
        return shape_err(format!("depthwise conv: input {xs:?} incompatible with weight {ws:?}"));
    }
    let op = DepthwiseOp {
        batch: xs[0],
        channels: xs[1],
        t: xs[2],
        kernel: ws[1],
        dilation,
    };
    let (c, t, k) = (op.channels, op.t, op.kernel);
    let mut out = vec![0.0; xs[0] * c * t];
    {
        let xv = g.value(x).data();
        let wv = g.value(w).data();
        let bv = g.value(bias).data();
        for b in 0..op.batch {
            for ch in 0..c {
                let base = (b * c + ch) * t;
                for ti in 0..t {
                    let mut acc = bv[ch];
                    for p in 0..k {
                        if let Some(s) = op.src(ti, p) {
                            acc += wv[ch * k + p] * xv[base + s];
                        }
                    }
                    out[base + ti] = acc;
                }
            }
        }
    }
    let out = Tensor::new(&xs, out)?;
    Ok(g.apply(Box::new(op), &[x, w, bias], out))
}
