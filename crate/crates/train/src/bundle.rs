//! Gradient bundles pushed from a worker to the primary.
//!
//! Layout: `u16 len | worker_id | u64 model_version | u32 micro_batch_count`
//! header, then `u32 count` and `count × (u16 name_len | name | tensor)`.

use shipnet_core::codec::{encode_named, put_str, put_u32, put_u64, Reader};
use shipnet_core::unet::ModelState;
use shipnet_core::Tensor;

use crate::error::{Result, TrainError};

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub worker_id: String,
    /// Version of the global weights the gradients were computed against.
    pub model_version: u64,
    pub micro_batch_count: u32,
    /// One entry per parameter, in model order.
    pub grads: Vec<(String, Tensor)>,
}

impl GradientBundle {
    /// Snapshot of the model's gradient slots. Every parameter must have one.
    pub fn from_model(model: &ModelState, worker_id: &str, model_version: u64, micro_batch_count: u32) -> Result<Self> {
        let grads = model
            .params
            .iter()
            .map(|p| match &p.grad {
                Some(g) => Ok((p.name.clone(), g.clone())),
                None => Err(TrainError::Protocol(format!("gradients not populated ({} is empty)", p.name))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GradientBundle {
            worker_id: worker_id.to_string(),
            model_version,
            micro_batch_count,
            grads,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        put_str(&mut out, &self.worker_id);
        put_u64(&mut out, self.model_version);
        put_u32(&mut out, self.micro_batch_count);
        put_u32(&mut out, self.grads.len() as u32);
        for (name, g) in &self.grads {
            encode_named(&mut out, name, g);
        }
        out
    }

    pub fn encoded_len(&self) -> usize {
        let header = 2 + self.worker_id.len() + 8 + 4 + 4;
        header + self.grads.iter().map(|(n, g)| 2 + n.len() + g.encoded_len()).sum::<usize>()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let proto = |e: shipnet_core::Error| TrainError::Protocol(format!("bundle decode: {e}"));
        let mut r = Reader::new(bytes);
        let worker_id = r.string().map_err(proto)?;
        let model_version = r.u64().map_err(proto)?;
        let micro_batch_count = r.u32().map_err(proto)?;
        let count = r.u32().map_err(proto)? as usize;
        let mut grads = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            grads.push(r.named_tensor().map_err(proto)?);
        }
        if r.remaining() != 0 {
            return Err(TrainError::Protocol(format!("{} trailing bytes after bundle", r.remaining())));
        }
        Ok(GradientBundle {
            worker_id,
            model_version,
            micro_batch_count,
            grads,
        })
    }

    /// Writes the gradients into the model's grad slots, replacing whatever
    /// is there. Names must match the model's parameter set exactly.
    pub fn load_into(&self, model: &mut ModelState) -> Result<()> {
        if self.grads.len() != model.params.len() {
            for (name, _) in &self.grads {
                if model.param(name).is_none() {
                    return Err(TrainError::Protocol(format!("unknown parameter {name}")));
                }
            }
            return Err(TrainError::Protocol(format!(
                "bundle carries {} gradients, model has {} parameters",
                self.grads.len(),
                model.params.len()
            )));
        }
        // Validate everything before touching the model.
        let mut slots = Vec::with_capacity(self.grads.len());
        for (name, g) in &self.grads {
            let idx = model
                .params
                .iter()
                .position(|p| &p.name == name)
                .ok_or_else(|| TrainError::Protocol(format!("unknown parameter {name}")))?;
            if slots.contains(&idx) {
                return Err(TrainError::Protocol(format!("parameter {name} appears twice")));
            }
            let want = model.params[idx].value.shape();
            if g.shape() != want {
                return Err(TrainError::Fatal(format!(
                    "gradient for {name} has shape {:?}, parameter is {want:?}",
                    g.shape()
                )));
            }
            slots.push(idx);
        }
        for ((_, g), idx) in self.grads.iter().zip(slots) {
            model.params[idx].grad = Some(g.clone());
        }
        Ok(())
    }
}

pub fn serialize_gradients(model: &ModelState, worker_id: &str, model_version: u64, k: u32) -> Result<Vec<u8>> {
    Ok(GradientBundle::from_model(model, worker_id, model_version, k)?.encode())
}

/// Decodes a bundle and loads it into `model`'s grad slots.
pub fn load_gradients(bytes: &[u8], model: &mut ModelState) -> Result<GradientBundle> {
    let bundle = GradientBundle::decode(bytes)?;
    bundle.load_into(model)?;
    Ok(bundle)
}
