//! Named parameter storage shared by encoders, gate, and optimizer.
//!
//! Parameters live in one flat [`ParamSet`]; modules hold [`ParamId`]
//! handles. Each training step binds the set into a fresh graph as leaves,
//! runs forward/backward, then pulls leaf gradients back into the set for
//! the optimizer. Checkpoints serialize the full named table with shapes and
//! raw 64-bit values, so save/load round-trips are bit-exact.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 8] = b"GMIPPRM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Per-parameter learning-rate multiplier (gate parameters train faster).
    pub lr_mult: f64,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    items: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

/// Graph leaves for one forward pass, aligned with the owning [`ParamSet`].
pub struct ParamBinding {
    vars: Vec<Var>,
}

impl ParamBinding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        mut value: Tensor,
        lr_mult: f64,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name '{name}'")));
        }
        value.set_requires_grad(trainable);
        let idx = self.items.len();
        self.by_name.insert(name.clone(), idx);
        self.items.push(Parameter { name, value, lr_mult, trainable });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.items.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.items[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.items[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.items[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.items.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.items.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.value.zero_grad();
        }
    }

    /// Inserts every parameter into `g` as a leaf, in registration order.
    pub fn bind(&self, g: &mut Graph) -> ParamBinding {
        ParamBinding { vars: self.items.iter().map(|p| g.leaf(&p.value)).collect() }
    }

    /// Like [`bind`](Self::bind) but substitutes caller-supplied nodes for
    /// selected parameters. Finite-difference checks use this to route one
    /// parameter through an externally perturbed leaf.
    pub fn bind_with(&self, g: &mut Graph, overrides: &[(ParamId, Var)]) -> ParamBinding {
        let vars = self
            .items
            .iter()
            .enumerate()
            .map(|(i, p)| {
                overrides
                    .iter()
                    .find(|(id, _)| id.0 == i)
                    .map(|&(_, v)| v)
                    .unwrap_or_else(|| g.leaf(&p.value))
            })
            .collect();
        ParamBinding { vars }
    }

    /// Accumulates gradients computed in `g` back onto the parameters.
    /// Leaves that did not participate contribute nothing (their stored
    /// gradient stays whatever it was, zero after `zero_grads`).
    pub fn collect_grads(&mut self, g: &Graph, binding: &ParamBinding) -> Result<()> {
        for (p, &v) in self.items.iter_mut().zip(&binding.vars) {
            if !p.trainable {
                continue;
            }
            if let Some(grad) = g.grad(v) {
                p.value.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Global L2 norm of all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut total = 0.0;
        for p in &self.items {
            if !p.trainable {
                continue;
            }
            if let Some(g) = p.value.grad() {
                total += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        total.sqrt()
    }

    /// Copies values (not grads) from a checkpoint set. Names and shapes
    /// must match exactly.
    pub fn adopt_values(&mut self, other: &ParamSet) -> Result<()> {
        if other.items.len() != self.items.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model has {}",
                other.items.len(),
                self.items.len()
            )));
        }
        for p in &mut self.items {
            let src = other
                .by_name
                .get(&p.name)
                .map(|&i| &other.items[i])
                .ok_or_else(|| Error::Data(format!("checkpoint missing parameter '{}'", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Data(format!(
                    "parameter '{}' shape {:?} vs checkpoint {:?}",
                    p.name,
                    p.value.shape(),
                    src.value.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    // ── Checkpoint serialization ────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&(self.items.len() as u64).to_le_bytes())?;
            for p in &self.items {
                let name = p.name.as_bytes();
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name)?;
                w.write_all(&p.lr_mult.to_le_bytes())?;
                w.write_all(&[p.trainable as u8])?;
                w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
                for &d in p.value.shape() {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                for &v in p.value.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Data(format!("{}: not a checkpoint file", path.display())));
        }
        let count = read_u64(&mut r)? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Data("checkpoint parameter name is not UTF-8".into()))?;
            let lr_mult = read_f64(&mut r)?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(read_f64(&mut r)?);
            }
            set.add(name, Tensor::new(shape, data)?, lr_mult, flag[0] != 0)?;
        }
        Ok(set)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ParamSet {
        let mut s = ParamSet::new();
        s.add("enc.w0", Tensor::matrix(2, 3, vec![1.5, -0.25, 0.0, 3.0, 1e-17, -2.0]).unwrap(), 1.0, true)
            .unwrap();
        s.add("gate.alpha_raw", Tensor::scalar(3.0), 5.0, true).unwrap();
        s.add("gate.neutral.1", Tensor::vector(vec![0.5, 0.5]), 1.0, false).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamSet::new();
        s.add("w", Tensor::scalar(1.0), 1.0, true).unwrap();
        assert!(s.add("w", Tensor::scalar(2.0), 1.0, true).is_err());
    }

    #[test]
    fn bind_collect_roundtrip() {
        let mut s = sample_set();
        let mut g = Graph::new();
        let binding = s.bind(&mut g);
        let alpha = binding.var(s.id_of("gate.alpha_raw").unwrap());
        let doubled = g.scale(alpha, 2.0);
        g.backward(doubled).unwrap();
        s.collect_grads(&g, &binding).unwrap();

        let alpha_grad = s.value(s.id_of("gate.alpha_raw").unwrap()).grad().unwrap();
        assert_eq!(alpha_grad, &[2.0]);
        // Non-participating trainable leaf keeps its zero gradient.
        let w0 = s.value(s.id_of("enc.w0").unwrap());
        assert!(w0.grad().unwrap().iter().all(|&v| v == 0.0));
        assert!((s.grad_norm() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let set = sample_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        set.save(&path).unwrap();
        let loaded = ParamSet::load(&path).unwrap();
        assert_eq!(loaded.len(), set.len());
        for (id, p) in set.iter() {
            let l = loaded.get(loaded.id_of(&p.name).unwrap());
            assert_eq!(l.value.shape(), p.value.shape());
            assert_eq!(l.lr_mult, p.lr_mult);
            assert_eq!(l.trainable, p.trainable);
            for (a, b) in l.value.data().iter().zip(p.value.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "value drift in '{}'", p.name);
            }
            let _ = id;
        }
    }

    #[test]
    fn adopt_values_checks_names_and_shapes() {
        let mut target = sample_set();
        let mut source = sample_set();
        source.get_mut(source.id_of("gate.alpha_raw").unwrap()).value =
            Tensor::scalar(-7.0);
        target.adopt_values(&source).unwrap();
        assert_eq!(target.value(target.id_of("gate.alpha_raw").unwrap()).item(), -7.0);

        let mut wrong = ParamSet::new();
        wrong.add("other", Tensor::scalar(0.0), 1.0, true).unwrap();
        assert!(target.adopt_values(&wrong).is_err());
    }
}
