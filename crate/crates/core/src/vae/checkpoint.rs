//! Model checkpoints: versioned JSON header followed by the weights and
//! batch-norm running statistics as little-endian 64-bit floats in canonical
//! parameter order.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::AttributeSchema;
use crate::error::{Error, Result};
use crate::rng::seed_rng;

use super::net::{visit_params, visit_params_mut};
use super::{VaeHyperparams, VaeModel};

const MAGIC: &[u8; 8] = b"CGVAE01\n";
const VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    version: u32,
    hyper: VaeHyperparams,
    schema: AttributeSchema,
    /// `(rows, cols)` of every parameter tensor, in canonical order.
    param_shapes: Vec<(usize, usize)>,
    /// Width of every batch-norm layer, encoder stack first.
    bn_widths: Vec<usize>,
}

fn bn_widths(model: &VaeModel) -> Vec<usize> {
    model
        .encoder
        .stack
        .layers
        .iter()
        .chain(model.decoder.stack.layers.iter())
        .filter_map(|l| l.bn.as_ref().map(|bn| bn.running_mean.len()))
        .collect()
}

pub fn save_checkpoint(path: &Path, model: &VaeModel) -> Result<()> {
    let params = visit_params(&model.encoder, &model.decoder);
    let header = Header {
        version: VERSION,
        hyper: model.hyper.clone(),
        schema: model.schema.clone(),
        param_shapes: params.iter().map(|p| (p.rows(), p.cols())).collect(),
        bn_widths: bn_widths(model),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Numerical(format!("checkpoint header encoding failed: {e}")))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for p in params {
        for v in p.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    for layer in model
        .encoder
        .stack
        .layers
        .iter()
        .chain(model.decoder.stack.layers.iter())
    {
        if let Some(bn) = &layer.bn {
            for v in bn.running_mean.iter().chain(bn.running_var.iter()) {
                file.write_all(&v.to_le_bytes())?;
            }
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<VaeModel> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Config(format!("unreadable checkpoint header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} not supported (expected {VERSION})",
            header.version
        )));
    }

    let mut model = VaeModel::init(header.hyper, header.schema, &mut seed_rng(0))?;
    let shapes: Vec<(usize, usize)> = visit_params(&model.encoder, &model.decoder)
        .iter()
        .map(|p| (p.rows(), p.cols()))
        .collect();
    if shapes != header.param_shapes || bn_widths(&model) != header.bn_widths {
        return Err(Error::Config(
            "checkpoint layer shapes do not match its hyperparameters".into(),
        ));
    }

    let read_f64 = |file: &mut dyn Read| -> Result<f64> {
        let mut buf = [0u8; 8];
        file.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    };
    for p in visit_params_mut(&mut model.encoder, &mut model.decoder) {
        for v in p.data_mut() {
            *v = read_f64(&mut file)?;
        }
    }
    for layer in model
        .encoder
        .stack
        .layers
        .iter_mut()
        .chain(model.decoder.stack.layers.iter_mut())
    {
        if let Some(bn) = &mut layer.bn {
            for v in bn.running_mean.iter_mut() {
                *v = read_f64(&mut file)?;
            }
            for v in bn.running_var.iter_mut() {
                *v = read_f64(&mut file)?;
            }
        }
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Config("trailing bytes after checkpoint payload".into()));
    }
    Ok(model)
}
