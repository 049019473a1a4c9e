//! Model files: a text manifest, a centroid block and a `PPWT` checkpoint.
//!
//! ```text
//! pitchpilot-model 1
//! # optional comment lines
//! arch=hcnn
//! k=4
//! centroid_dim=10
//!
//! <k·dim f64 little-endian centroids><PPWT checkpoint>
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{
    cnn_forward, hcnn_forward, rcnn_forward, ClusterModel, CnnParams, ParamSet, PolicyError,
    RcnnParams, HIST_FEATURES, LSTM_HIDDEN,
};
use crate::controller::{Controller, Observation};
use crate::simworld::SpeedCommand;
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};

const MODEL_HEADER: &str = "pitchpilot-model 1";

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Cnn(CnnParams),
    Hcnn(ClusterModel),
    Rcnn(RcnnParams),
}

impl Model {
    pub fn arch(&self) -> &'static str {
        match self {
            Model::Cnn(_) => "cnn",
            Model::Hcnn(_) => "hcnn",
            Model::Rcnn(_) => "rcnn",
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Model::Cnn(p) => p.param_count(),
            Model::Hcnn(m) => m.members.iter().map(|p| p.param_count()).sum(),
            Model::Rcnn(p) => p.param_count(),
        }
    }

    pub fn controller(&self) -> PolicyController {
        PolicyController::new(self.clone())
    }
}

fn prefixed<'a, P: ParamSet<f32>>(prefix: &str, p: &'a P) -> Vec<(String, &'a Tensor)> {
    p.named()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}{n}"), t))
        .collect()
}

pub fn write_model<W: Write>(mut w: W, model: &Model, comment: Option<&str>) -> Result<(), PolicyError> {
    let (k, dim) = match model {
        Model::Hcnn(m) => (m.k(), HIST_FEATURES),
        _ => (0, 0),
    };
    writeln!(w, "{MODEL_HEADER}")?;
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    writeln!(w, "arch={}\nk={k}\ncentroid_dim={dim}\n", model.arch())?;
    let tensors = match model {
        Model::Cnn(p) => prefixed("", p),
        Model::Rcnn(p) => prefixed("", p),
        Model::Hcnn(m) => {
            for c in &m.centroids {
                if c.len() != dim {
                    return Err(PolicyError::Format(format!("centroid of length {}", c.len())));
                }
                for &v in c {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            m.members
                .iter()
                .enumerate()
                .flat_map(|(j, p)| prefixed(&format!("m{j}."), p))
                .collect()
        }
    };
    write_checkpoint(&mut w, tensors.iter().map(|(n, t)| (n.as_str(), *t)))?;
    w.flush()?;
    Ok(())
}

fn fill<P: ParamSet<f32>>(p: &mut P, prefix: &str, tensors: &mut HashMap<String, Tensor>) -> Result<(), PolicyError> {
    for (name, slot) in p.named_mut() {
        let key = format!("{prefix}{name}");
        let t = tensors
            .remove(&key)
            .ok_or_else(|| PolicyError::Format(format!("missing tensor {key}")))?;
        if t.shape() != slot.shape() {
            return Err(PolicyError::Format(format!(
                "tensor {key} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

pub fn read_model<R: Read>(r: R) -> Result<Model, PolicyError> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MODEL_HEADER {
        return Err(PolicyError::Format("not a pitchpilot model file".into()));
    }
    let mut fields = HashMap::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(PolicyError::Format("manifest is not terminated".into()));
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if l.starts_with('#') {
            continue;
        }
        let (key, value) = l
            .split_once('=')
            .ok_or_else(|| PolicyError::Format(format!("manifest line {l:?}")))?;
        fields.insert(key.to_string(), value.to_string());
    }
    let get = |key: &str| {
        fields
            .get(key)
            .cloned()
            .ok_or_else(|| PolicyError::Format(format!("manifest lacks {key}")))
    };
    let num = |key: &str| -> Result<usize, PolicyError> {
        get(key)?
            .parse()
            .map_err(|_| PolicyError::Format(format!("manifest {key} is not a number")))
    };
    let arch = get("arch")?;
    let (k, dim) = (num("k")?, num("centroid_dim")?);
    if arch == "hcnn" && (k == 0 || dim != HIST_FEATURES) {
        return Err(PolicyError::Format(format!("hcnn with k={k}, centroid_dim={dim}")));
    }
    if arch != "hcnn" && (k != 0 || dim != 0) {
        return Err(PolicyError::Format(format!("{arch} model with centroids")));
    }
    let mut block = vec![0u8; k * dim * 8];
    r.read_exact(&mut block)?;
    let centroids: Vec<Vec<f64>> = block
        .chunks_exact(dim.max(1) * 8)
        .map(|c| {
            c.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect();
    let mut tensors: HashMap<String, Tensor> = read_checkpoint(&mut r)?.into_iter().collect();
    let model = match arch.as_str() {
        "cnn" => {
            let mut p = CnnParams::zeros();
            fill(&mut p, "", &mut tensors)?;
            Model::Cnn(p)
        }
        "rcnn" => {
            let mut p = RcnnParams::zeros();
            fill(&mut p, "", &mut tensors)?;
            Model::Rcnn(p)
        }
        "hcnn" => {
            let mut members = vec![];
            for j in 0..k {
                let mut p = CnnParams::zeros();
                fill(&mut p, &format!("m{j}."), &mut tensors)?;
                members.push(p);
            }
            Model::Hcnn(ClusterModel { centroids, members })
        }
        other => return Err(PolicyError::Format(format!("unknown architecture {other:?}"))),
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(PolicyError::Format(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>, comment: Option<&str>) -> Result<(), PolicyError> {
    write_model(BufWriter::new(File::create(path)?), model, comment)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model, PolicyError> {
    read_model(File::open(path)?)
}

/// A trained model driving the robot from camera frames alone. Forward
/// errors surface as a non-finite command.
#[derive(Clone, Debug)]
pub struct PolicyController {
    model: Model,
    h: Tensor,
    c: Tensor,
    label: u8,
}

impl PolicyController {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            h: Tensor::zeros(&[LSTM_HIDDEN]),
            c: Tensor::zeros(&[LSTM_HIDDEN]),
            label: 0,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn try_act(&mut self, obs: &Observation) -> Result<SpeedCommand, PolicyError> {
        match &self.model {
            Model::Cnn(p) => cnn_forward(p, obs.top, obs.bottom),
            Model::Hcnn(m) => {
                let (cmd, j) = hcnn_forward(m, obs.top, obs.bottom)?;
                self.label = j as u8;
                Ok(cmd)
            }
            Model::Rcnn(p) => {
                let (cmd, h, c) = rcnn_forward(p, obs.top, obs.bottom, &self.h, &self.c)?;
                (self.h, self.c) = (h, c);
                Ok(cmd)
            }
        }
    }
}

impl Controller for PolicyController {
    fn reset(&mut self) {
        self.h = Tensor::zeros(&[LSTM_HIDDEN]);
        self.c = Tensor::zeros(&[LSTM_HIDDEN]);
        self.label = 0;
    }

    fn act(&mut self, obs: &Observation) -> SpeedCommand {
        self.try_act(obs).unwrap_or(SpeedCommand {
            forward: f64::NAN,
            left: f64::NAN,
            turn: f64::NAN,
        })
    }

    /// The dispatched cluster for H-CNN, zero otherwise.
    fn label(&self) -> u8 {
        self.label
    }

    fn name(&self) -> String {
        self.model.arch().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn round_trip(m: &Model) -> Model {
        let mut bytes = vec![];
        write_model(&mut bytes, m, Some("seed=1\nnote")).unwrap();
        read_model(bytes.as_slice()).unwrap()
    }

    #[test]
    fn all_architectures_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cnn = Model::Cnn(CnnParams::init(&mut rng));
        assert_eq!(round_trip(&cnn), cnn);
        let rcnn = Model::Rcnn(RcnnParams::init(&mut rng));
        assert_eq!(round_trip(&rcnn), rcnn);
        let hcnn = Model::Hcnn(ClusterModel {
            centroids: vec![vec![0.5; 10], vec![0.25; 10]],
            members: vec![CnnParams::init(&mut rng), CnnParams::init(&mut rng)],
        });
        assert_eq!(round_trip(&hcnn), hcnn);
    }

    #[test]
    fn manifest_errors() {
        assert!(read_model(&b"garbage\n"[..]).is_err());
        assert!(read_model(&b"pitchpilot-model 1\narch=cnn\n"[..]).is_err());
        let mut bytes = vec![];
        write_model(&mut bytes, &Model::Cnn(CnnParams::zeros()), None).unwrap();
        let text = String::from_utf8_lossy(&bytes[..40]).replace("arch=cnn", "arch=rnn");
        let mut bad = text.into_bytes();
        bad.extend_from_slice(&bytes[40..]);
        assert!(matches!(read_model(bad.as_slice()), Err(PolicyError::Format(_))));
        let cut = &bytes[..bytes.len() - 4];
        assert!(read_model(cut).is_err());
    }
}
