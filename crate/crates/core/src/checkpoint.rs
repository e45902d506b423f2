//! On-disk model format.
//!
//! A checkpoint is one line of compact JSON describing the model, a `\n`, and
//! then every parameter as a little-endian `f64`, layer by layer (weights
//! row-major, then bias). Loading reproduces the parameters bit for bit.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{layer_shapes, Activation, MlpClassifier, PerturbationGenerator};
use crate::params::ParamVector;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Header {
    Generator {
        format: u32,
        encoder_dims: Vec<usize>,
        decoder_dims: Vec<usize>,
        activation: Activation,
        budget: f64,
        seed: Option<u64>,
        params: usize,
    },
    Classifier {
        format: u32,
        layer_dims: Vec<usize>,
        activation: Activation,
        seed: Option<u64>,
        params: usize,
    },
}

impl Header {
    fn format(&self) -> u32 {
        match self {
            Header::Generator { format, .. } | Header::Classifier { format, .. } => *format,
        }
    }

    fn params(&self) -> usize {
        match self {
            Header::Generator { params, .. } | Header::Classifier { params, .. } => *params,
        }
    }
}

fn write_parts(mut sink: impl Write, header: &Header, params: &ParamVector) -> Result<()> {
    serde_json::to_writer(&mut sink, header)?;
    sink.write_all(b"\n")?;
    let flat = params.flatten();
    let mut bytes = Vec::with_capacity(flat.len() * 8);
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(())
}

fn read_parts(source: impl Read) -> Result<(Header, Vec<f64>)> {
    let mut reader = BufReader::new(source);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Checkpoint("missing header line".into()));
    }
    let header: Header = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format() != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", header.format())));
    }
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    if body.len() != header.params() * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            header.params() * 8,
            body.len()
        )));
    }
    let flat = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header, flat))
}

pub fn write_generator(sink: impl Write, gen: &PerturbationGenerator, seed: Option<u64>) -> Result<()> {
    let header = Header::Generator {
        format: FORMAT_VERSION,
        encoder_dims: gen.encoder_dims().to_vec(),
        decoder_dims: gen.decoder_dims().to_vec(),
        activation: gen.activation(),
        budget: gen.budget(),
        seed,
        params: gen.params().len(),
    };
    write_parts(sink, &header, gen.params())
}

pub fn read_generator(source: impl Read) -> Result<(PerturbationGenerator, Option<u64>)> {
    match read_parts(source)? {
        (Header::Generator { encoder_dims, decoder_dims, activation, budget, seed, .. }, flat) => {
            let dims: Vec<usize> = encoder_dims.iter().chain(decoder_dims.iter().skip(1)).copied().collect();
            let params = ParamVector::unflatten(&layer_shapes(&dims), &flat)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let gen = PerturbationGenerator::with_params(encoder_dims, decoder_dims, activation, budget, params)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            Ok((gen, seed))
        }
        (Header::Classifier { .. }, _) => Err(Error::Checkpoint("expected a generator, found a classifier".into())),
    }
}

pub fn write_classifier(sink: impl Write, model: &MlpClassifier, seed: Option<u64>) -> Result<()> {
    let header = Header::Classifier {
        format: FORMAT_VERSION,
        layer_dims: model.layer_dims().to_vec(),
        activation: model.activation(),
        seed,
        params: model.params().len(),
    };
    write_parts(sink, &header, model.params())
}

pub fn read_classifier(source: impl Read) -> Result<(MlpClassifier, Option<u64>)> {
    match read_parts(source)? {
        (Header::Classifier { layer_dims, activation, seed, .. }, flat) => {
            let params = ParamVector::unflatten(&layer_shapes(&layer_dims), &flat)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let model = MlpClassifier::with_params(layer_dims, activation, params)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            Ok((model, seed))
        }
        (Header::Generator { .. }, _) => Err(Error::Checkpoint("expected a classifier, found a generator".into())),
    }
}

pub fn save_generator(path: &Path, gen: &PerturbationGenerator, seed: Option<u64>) -> Result<()> {
    write_generator(std::io::BufWriter::new(std::fs::File::create(path)?), gen, seed)
}

pub fn load_generator(path: &Path) -> Result<(PerturbationGenerator, Option<u64>)> {
    read_generator(std::fs::File::open(path)?)
}
