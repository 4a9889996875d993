//! Plain-text model checkpoints.
//!
//! ```text
//! morphgate-checkpoint 1
//! layer_dims = 16,64,64,32
//! margin = 0.2
//! seed = 7
//! params = 3232
//! <one parameter per line>
//! ```
//!
//! Values are written with the shortest round-trip decimal form, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Layer, MlpParams};
use crate::error::{Error, Result};

const MAGIC: &str = "morphgate-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub margin: f64,
    pub seed: u64,
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> std::io::Result<()> {
    let dims: Vec<String> = ckpt
        .params
        .layer_dims
        .iter()
        .map(|d| d.to_string())
        .collect();
    writeln!(w, "{MAGIC} {VERSION}")?;
    writeln!(w, "layer_dims = {}", dims.join(","))?;
    writeln!(w, "margin = {}", ckpt.margin)?;
    writeln!(w, "seed = {}", ckpt.seed)?;
    writeln!(w, "params = {}", ckpt.params.num_params())?;
    for v in ckpt.params.values() {
        writeln!(w, "{v}")?;
    }
    w.flush()
}

pub fn read_checkpoint<R: Read>(r: R, origin: &Path) -> Result<Checkpoint> {
    let mut lines = BufReader::new(r).lines().enumerate();
    let mut next = |what: &str| -> Result<(u64, String)> {
        match lines.next() {
            Some((i, Ok(line))) => Ok((i as u64 + 1, line)),
            Some((i, Err(e))) => Err(Error::parse(origin, i as u64 + 1, e.to_string())),
            None => Err(Error::parse(
                origin,
                0,
                format!("unexpected end of file, expected {what}"),
            )),
        }
    };

    let (ln, header) = next("header")?;
    if header.trim() != format!("{MAGIC} {VERSION}") {
        return Err(Error::parse(
            origin,
            ln,
            format!("expected '{MAGIC} {VERSION}'"),
        ));
    }
    let mut field = |key: &str| -> Result<(u64, String)> {
        let (ln, line) = next(key)?;
        match line.split_once('=') {
            Some((k, v)) if k.trim() == key => Ok((ln, v.trim().to_string())),
            _ => Err(Error::parse(origin, ln, format!("expected '{key} = ...'"))),
        }
    };
    let (ln, dims) = field("layer_dims")?;
    let layer_dims = dims
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::parse(origin, ln, format!("layer_dims: {e}")))?;
    let (ln, margin) = field("margin")?;
    let margin: f64 = margin
        .parse()
        .map_err(|e| Error::parse(origin, ln, format!("margin: {e}")))?;
    let (ln, seed) = field("seed")?;
    let seed: u64 = seed
        .parse()
        .map_err(|e| Error::parse(origin, ln, format!("seed: {e}")))?;
    let (ln, count) = field("params")?;
    let count: usize = count
        .parse()
        .map_err(|e| Error::parse(origin, ln, format!("params: {e}")))?;

    let layers: Vec<Layer> = layer_dims
        .windows(2)
        .map(|w| Layer::zeros(w[0], w[1]))
        .collect();
    let mut params =
        MlpParams::from_layers(layers).map_err(|e| Error::parse(origin, ln, e.to_string()))?;
    if params.num_params() != count {
        return Err(Error::parse(
            origin,
            ln,
            format!(
                "layer_dims imply {} parameters, header says {count}",
                params.num_params()
            ),
        ));
    }
    for slot in params.values_mut() {
        let (ln, line) = next("parameter value")?;
        let v: f64 = line
            .trim()
            .parse()
            .map_err(|_| Error::parse(origin, ln, format!("bad parameter '{line}'")))?;
        if !v.is_finite() {
            return Err(Error::parse(origin, ln, "non-finite parameter"));
        }
        *slot = v;
    }
    Ok(Checkpoint {
        params,
        margin,
        seed,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(file), ckpt).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(file, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), margin in 0.01f64..1.0) {
            let params = MlpParams::init(&[5, 7, 3], seed).unwrap();
            let ckpt = Checkpoint { params, margin, seed };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &ckpt).unwrap();
            let back = read_checkpoint(buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, ckpt);
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let ckpt = Checkpoint {
            params: MlpParams::init(&[2, 2], 1).unwrap(),
            margin: 0.2,
            seed: 1,
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let text = String::from_utf8(buf).unwrap();

        let truncated: String = text.lines().take(7).map(|l| format!("{l}\n")).collect();
        assert!(read_checkpoint(truncated.as_bytes(), Path::new("m")).is_err());

        let wrong_count = text.replace("params = 6", "params = 7");
        assert!(read_checkpoint(wrong_count.as_bytes(), Path::new("m")).is_err());

        let bad_magic = text.replace("morphgate-checkpoint 1", "something 1");
        assert!(matches!(
            read_checkpoint(bad_magic.as_bytes(), Path::new("m")),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
