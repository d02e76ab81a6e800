//! Binary parameter files.
//!
//! Each network block is: magic `CLUENN1\0`, little-endian `u32` layer count,
//! one `(in, out)` `u32` pair per layer, then per layer the `out × in`
//! row-major weights followed by the `out` biases as little-endian `f64`.
//! Multi-network checkpoints are blocks written back to back.

use std::io::{Read, Write};

use super::mlp::{Activation, Mlp, OutputActivation};
use crate::error::{ClueError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLUENN1\0";

pub fn write_mlps<W: Write>(mut w: W, nets: &[&Mlp]) -> Result<()> {
    for net in nets {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(net.num_layers() as u32).to_le_bytes())?;
        for pair in net.layer_sizes().windows(2) {
            w.write_all(&(pair[0] as u32).to_le_bytes())?;
            w.write_all(&(pair[1] as u32).to_le_bytes())?;
        }
        for p in net.params() {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `activations.len()` consecutive blocks. Activations are not stored in
/// the binary file and come from the caller (usually a JSON sidecar).
pub fn read_mlps<R: Read>(
    mut r: R,
    activations: &[(Activation, OutputActivation)],
) -> Result<Vec<Mlp>> {
    let mut offset = 0usize;
    let mut nets = Vec::with_capacity(activations.len());
    for &(hidden, output) in activations {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, &mut offset)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(parse_err(offset - 8, "bad magic bytes"));
        }
        let layers = read_u32(&mut r, &mut offset)? as usize;
        if layers == 0 {
            return Err(parse_err(offset - 4, "zero layer count"));
        }
        let mut sizes = Vec::with_capacity(layers + 1);
        for l in 0..layers {
            let n_in = read_u32(&mut r, &mut offset)? as usize;
            let n_out = read_u32(&mut r, &mut offset)? as usize;
            if l == 0 {
                sizes.push(n_in);
            } else if sizes[l] != n_in {
                return Err(parse_err(offset - 8, "layer shapes do not compose"));
            }
            sizes.push(n_out);
        }
        let mut net =
            Mlp::zeros(&sizes, hidden, output).map_err(|e| parse_err(offset, &e.to_string()))?;
        let mut buf = [0u8; 8];
        for p in net.params_mut() {
            read_exact(&mut r, &mut buf, &mut offset)?;
            *p = f64::from_le_bytes(buf);
        }
        nets.push(net);
    }
    Ok(nets)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut usize) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| parse_err(*offset, "unexpected end of checkpoint"))?;
    *offset += buf.len();
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, offset: &mut usize) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, offset)?;
    Ok(u32::from_le_bytes(b))
}

fn parse_err(offset: usize, message: &str) -> ClueError {
    ClueError::Parse {
        location: format!("byte {offset}"),
        message: message.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn round_trip_two_networks() {
        let mut rng = seeded(4);
        let a = Mlp::new(
            &[3, 5, 2],
            Activation::Relu,
            OutputActivation::Identity,
            &mut rng,
        )
        .unwrap();
        let b = Mlp::new(&[2, 1], Activation::Relu, OutputActivation::Tanh, &mut rng).unwrap();
        let mut bytes = Vec::new();
        write_mlps(&mut bytes, &[&a, &b]).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        let acts = [
            (Activation::Relu, OutputActivation::Identity),
            (Activation::Relu, OutputActivation::Tanh),
        ];
        let back = read_mlps(bytes.as_slice(), &acts).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let net = Mlp::zeros(&[2, 2], Activation::Relu, OutputActivation::Identity).unwrap();
        let mut bytes = Vec::new();
        write_mlps(&mut bytes, &[&net]).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = read_mlps(
            bytes.as_slice(),
            &[(Activation::Relu, OutputActivation::Identity)],
        )
        .unwrap_err();
        assert!(matches!(err, ClueError::Parse { .. }));
    }

    #[test]
    fn bad_magic_rejected() {
        let err = read_mlps(
            &b"NOTCLUE\0\x01\0\0\0"[..],
            &[(Activation::Relu, OutputActivation::Identity)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
