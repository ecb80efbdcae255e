use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter (empty for frozen tensors) and the
/// step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |id| {
            if store.is_trainable(id) {
                vec![0.0; store.get(id).numel()]
            } else {
                Vec::new()
            }
        };
        Self {
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u32::<LittleEndian>(self.m.len() as u32)?;
        for (m, v) in self.m.iter().zip(&self.v) {
            w.write_u64::<LittleEndian>(m.len() as u64)?;
            for x in m.iter().chain(v) {
                w.write_f64::<LittleEndian>(*x)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let step = r.read_u64::<LittleEndian>()?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let (mut ms, mut vs) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let len = r.read_u64::<LittleEndian>()? as usize;
            let mut read = || (0..len).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>();
            ms.push(read()?);
            vs.push(read()?);
        }
        Ok(Self { step, m: ms, v: vs })
    }
}

/// One AdamW update of every trainable tensor in `store`.
///
/// Weight decay is decoupled (`p ← p − lr·wd·p`) and applied before the
/// bias-corrected moment step. Frozen tensors are untouched.
pub fn adamw_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamWState, hp: &AdamWHyper) -> Result<()> {
    let ids = store.trainable_ids();
    for &id in &ids {
        if grads.get(id).is_none() {
            return Err(Error::Contract(format!("no gradient for trainable tensor {}", store.name(id))));
        }
        if state.m.get(id.index()).map(Vec::len) != Some(store.get(id).numel()) {
            return Err(Error::Contract(format!("optimizer state does not match tensor {}", store.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = hp.betas;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for id in ids {
        let g = grads.get(id).expect("checked");
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let p = store.get_mut(id).data_mut();
        for j in 0..p.len() {
            p[j] -= hp.lr * hp.weight_decay * p[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let (mh, vh) = (m[j] / c1, v[j] / c2);
            p[j] -= hp.lr * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}
