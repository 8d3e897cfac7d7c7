//! Plain-text parameter snapshots.
//!
//! ```text
//! mlp widths=3,8,1 batch_norm=1 input_batch_norm=0 bn_eps=0.000001 bn_momentum=0.99
//! tensor 1 weight 8x3
//! <24 values, row-major>
//! tensor 1 bias 8
//! ...
//! end
//! ```
//!
//! Values use the shortest decimal form that round-trips, so a reload is
//! bit-exact. Layer 0 holds input batch-norm tensors when enabled.

use std::io::Write;

use super::{BnStats, Mlp, MlpSpec};
use crate::error::{Error, Result};

struct Tensor<'a> {
    layer: usize,
    name: &'static str,
    shape: Vec<usize>,
    values: &'a [f64],
}

impl Mlp {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let layout = self.layout();
        let mut out = Vec::new();
        let mut stats = self.stats.iter();
        if let Some(n) = layout.input_norm {
            let q = self.spec.widths[0];
            let st = stats.next().unwrap();
            out.push(Tensor { layer: 0, name: "bn_gamma", shape: vec![q], values: &self.params[n.gamma..n.beta] });
            out.push(Tensor { layer: 0, name: "bn_beta", shape: vec![q], values: &self.params[n.beta..n.beta + q] });
            out.push(Tensor { layer: 0, name: "bn_running_mean", shape: vec![q], values: &st.mean });
            out.push(Tensor { layer: 0, name: "bn_running_var", shape: vec![q], values: &st.var });
        }
        for (i, l) in layout.layers.iter().enumerate() {
            let layer = i + 1;
            out.push(Tensor { layer, name: "weight", shape: vec![l.qout, l.qin], values: &self.params[l.w..l.b] });
            out.push(Tensor { layer, name: "bias", shape: vec![l.qout], values: &self.params[l.b..l.b + l.qout] });
            if let Some(n) = l.norm {
                let st = stats.next().unwrap();
                out.push(Tensor { layer, name: "bn_gamma", shape: vec![l.qout], values: &self.params[n.gamma..n.beta] });
                out.push(Tensor { layer, name: "bn_beta", shape: vec![l.qout], values: &self.params[n.beta..n.beta + l.qout] });
                out.push(Tensor { layer, name: "bn_running_mean", shape: vec![l.qout], values: &st.mean });
                out.push(Tensor { layer, name: "bn_running_var", shape: vec![l.qout], values: &st.var });
            }
        }
        out
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let s = &self.spec;
        let widths: Vec<String> = s.widths.iter().map(|q| q.to_string()).collect();
        writeln!(
            w,
            "mlp widths={} batch_norm={} input_batch_norm={} bn_eps={} bn_momentum={}",
            widths.join(","),
            s.batch_norm as u8,
            s.input_batch_norm as u8,
            s.bn_eps,
            s.bn_momentum
        )?;
        for t in self.tensors() {
            let shape: Vec<String> = t.shape.iter().map(|q| q.to_string()).collect();
            writeln!(w, "tensor {} {} {}", t.layer, t.name, shape.join("x"))?;
            let vals: Vec<String> = t.values.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", vals.join(" "))?;
        }
        writeln!(w, "end")
    }

    /// Read one network written by [`Mlp::write_snapshot`] from a line iterator.
    pub fn read_snapshot<I>(lines: &mut I) -> Result<Mlp>
    where
        I: Iterator<Item = std::io::Result<String>>,
    {
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Snapshot("unexpected end of input".into()))?
                .map_err(Error::from)
        };
        let header = next()?;
        let spec = parse_header(&header)?;
        spec.validate()?;
        let mut net = Mlp::zeros(spec)?;
        let expected: Vec<(usize, &'static str, Vec<usize>)> =
            net.tensors().iter().map(|t| (t.layer, t.name, t.shape.clone())).collect();
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(expected.len());
        for (layer, name, shape) in &expected {
            let line = next()?;
            let want = format!(
                "tensor {layer} {name} {}",
                shape.iter().map(|q| q.to_string()).collect::<Vec<_>>().join("x")
            );
            if line.trim() != want {
                return Err(Error::Snapshot(format!("expected `{want}`, found `{line}`")));
            }
            let data = next()?;
            let v: Vec<f64> = data
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Snapshot(format!("{name}: {e}"))))
                .collect::<Result<_>>()?;
            if v.len() != shape.iter().product::<usize>() {
                return Err(Error::Snapshot(format!("{name}: expected {} values, found {}", shape.iter().product::<usize>(), v.len())));
            }
            values.push(v);
        }
        if next()?.trim() != "end" {
            return Err(Error::Snapshot("missing `end`".into()));
        }
        net.assign_tensors(&expected, values);
        Ok(net)
    }

    fn assign_tensors(&mut self, expected: &[(usize, &'static str, Vec<usize>)], values: Vec<Vec<f64>>) {
        let layout = self.layout().clone();
        let mut stats: Vec<BnStats> = Vec::new();
        let mut it = expected.iter().zip(values);
        let mut take = || it.next().unwrap().1;
        if let Some(n) = layout.input_norm {
            let q = self.spec.widths[0];
            self.params[n.gamma..n.beta].copy_from_slice(&take());
            self.params[n.beta..n.beta + q].copy_from_slice(&take());
            stats.push(BnStats { mean: take(), var: take() });
        }
        for l in &layout.layers {
            self.params[l.w..l.b].copy_from_slice(&take());
            self.params[l.b..l.b + l.qout].copy_from_slice(&take());
            if let Some(n) = l.norm {
                self.params[n.gamma..n.beta].copy_from_slice(&take());
                self.params[n.beta..n.beta + l.qout].copy_from_slice(&take());
                stats.push(BnStats { mean: take(), var: take() });
            }
        }
        self.stats = stats;
    }
}

fn parse_header(line: &str) -> Result<MlpSpec> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("mlp") {
        return Err(Error::Snapshot(format!("expected mlp header, found `{line}`")));
    }
    let mut spec = MlpSpec::new(Vec::new());
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Snapshot(format!("malformed field `{kv}`")))?;
        let bad = |e: &dyn std::fmt::Display| Error::Snapshot(format!("{k}: {e}"));
        match k {
            "widths" => {
                spec.widths = v
                    .split(',')
                    .map(|q| q.parse::<usize>().map_err(|e| bad(&e)))
                    .collect::<Result<_>>()?
            }
            "batch_norm" => spec.batch_norm = v == "1",
            "input_batch_norm" => spec.input_batch_norm = v == "1",
            "bn_eps" => spec.bn_eps = v.parse().map_err(|e| bad(&e))?,
            "bn_momentum" => spec.bn_momentum = v.parse().map_err(|e| bad(&e))?,
            _ => return Err(Error::Snapshot(format!("unknown field `{k}`"))),
        }
    }
    Ok(spec)
}
