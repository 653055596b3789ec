use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};

/// Shadow copies of every trainable parameter.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<(String, Tensor)>,
}

impl EmaState {
    pub fn new(store: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid(format!("EMA decay {decay} outside [0, 1]")));
        }
        let shadow = store
            .entries()
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| Ok((e.name.clone(), e.var.as_tensor().copy()?.detach())))
            .collect::<Result<_>>()?;
        Ok(Self { decay, shadow })
    }

    /// `shadow ← decay·shadow + (1 − decay)·param`
    pub fn update(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::shape(format!(
                "EMA tracks {} tensors, got {}",
                self.shadow.len(),
                params.len()
            )));
        }
        for ((name, s), (pname, p)) in self.shadow.iter_mut().zip(params) {
            if name != pname || s.dims() != p.dims() {
                return Err(Error::shape(format!(
                    "EMA entry {name} {:?} vs parameter {pname} {:?}",
                    s.dims(),
                    p.dims()
                )));
            }
            *s = (s.affine(self.decay, 0.0)? + p.detach().affine(1.0 - self.decay, 0.0)?)?;
        }
        Ok(())
    }

    pub fn update_from_store(&mut self, store: &ParamStore) -> Result<()> {
        let params: Vec<(String, Tensor)> = store
            .entries()
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| (e.name.clone(), e.var.as_tensor().clone()))
            .collect();
        self.update(&params)
    }
}

pub fn ema_update(mut ema: EmaState, params: &[(String, Tensor)]) -> Result<EmaState> {
    ema.update(params)?;
    Ok(ema)
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    fn state(decay: f64, v: f64) -> EmaState {
        EmaState {
            decay,
            shadow: vec![("w".into(), scalar(v))],
        }
    }

    fn value(e: &EmaState) -> f64 {
        e.shadow[0].1.to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn decay_endpoints_and_blend() {
        let p = [("w".to_string(), scalar(0.0))];
        assert_eq!(value(&ema_update(state(0.0, 1.0), &p).unwrap()), 0.0);
        assert_eq!(value(&ema_update(state(1.0, 1.0), &p).unwrap()), 1.0);
        assert!((value(&ema_update(state(0.9, 1.0), &p).unwrap()) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = [("w".to_string(), Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap())];
        assert!(ema_update(state(0.5, 1.0), &p).is_err());
        assert!(ema_update(state(0.5, 1.0), &[]).is_err());
    }
}
