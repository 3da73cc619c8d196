//! VGG-16 encoder import from `.npz` archives.
//!
//! Two key conventions are accepted: `conv1_1_W` / `conv1_1_b` and
//! `block1_conv1_kernel` / `block1_conv1_bias`. Kernels are stored as
//! (kh, kw, cin, cout) float32 arrays.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Seek, Write};
use std::path::Path;

use super::graph::VGG_LAYERS;
use super::network::{Network, ParamRole};
use crate::error::{Error, Result};

/// A float32 array read from or written to a `.npy` entry.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn parse_npy(bytes: &[u8]) -> std::result::Result<NpyArray, String> {
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err("missing npy magic".into());
    }
    let major = bytes[6];
    let (header_len, start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err("truncated npy header".into());
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        v => return Err(format!("unsupported npy version {v}")),
    };
    let header = std::str::from_utf8(
        bytes
            .get(start..start + header_len)
            .ok_or("truncated npy header")?,
    )
    .map_err(|e| e.to_string())?;
    let field = |key: &str| -> Option<&str> {
        let i = header.find(&format!("'{key}'"))?;
        let rest = &header[i + key.len() + 2..];
        Some(rest.trim_start().trim_start_matches(':').trim_start())
    };
    let descr = field("descr").ok_or("npy header lacks descr")?;
    if !descr.starts_with("'<f4'") {
        return Err(format!("only little-endian float32 is supported, got {}", &descr[..descr.find(',').unwrap_or(descr.len())]));
    }
    if field("fortran_order").is_some_and(|v| v.starts_with("True")) {
        return Err("fortran-ordered arrays are not supported".into());
    }
    let shape_str = field("shape").ok_or("npy header lacks shape")?;
    let close = shape_str.find(')').ok_or("malformed shape")?;
    let shape: Vec<usize> = shape_str[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    let count: usize = shape.iter().product();
    let body = &bytes[start + header_len..];
    if body.len() < count * 4 {
        return Err(format!("npy body holds {} bytes, expected {}", body.len(), count * 4));
    }
    let data = body[..count * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(NpyArray { shape, data })
}

fn encode_npy(a: &NpyArray) -> Vec<u8> {
    let dims: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
    let shape = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    // pad so the data starts on a 64-byte boundary
    let total = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + a.data.len() * 4);
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in &a.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Read every float32 entry of an `.npz` archive.
pub fn read_npz(path: &Path) -> Result<HashMap<String, NpyArray>> {
    let file = File::open(path).map_err(|e| Error::load(path, e))?;
    read_npz_from(file).map_err(|e| Error::load(path, e))
}

fn read_npz_from<R: Read + Seek>(reader: R) -> std::result::Result<HashMap<String, NpyArray>, String> {
    let mut zip = zip::ZipArchive::new(reader).map_err(|e| e.to_string())?;
    let mut out = HashMap::new();
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i).map_err(|e| e.to_string())?;
        let name = entry.name().trim_end_matches(".npy").to_string();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
        let arr = parse_npy(&bytes).map_err(|e| format!("{name}: {e}"))?;
        out.insert(name, arr);
    }
    Ok(out)
}

/// Write arrays as an uncompressed `.npz` archive.
pub fn write_npz(path: &Path, arrays: &[(&str, &NpyArray)]) -> Result<()> {
    let file = File::create(path)?;
    let mut zip = zip::ZipWriter::new(file);
    let opts = zip::write::SimpleFileOptions::default().compression_method(zip::CompressionMethod::Stored);
    for (name, arr) in arrays {
        zip.start_file(format!("{name}.npy"), opts)
            .map_err(|e| Error::load(path, e))?;
        zip.write_all(&encode_npy(arr))?;
    }
    zip.finish().map_err(|e| Error::load(path, e))?;
    Ok(())
}

/// Archive key pairs (kernel, bias) accepted for the i-th VGG layer.
fn vgg_keys(i: usize) -> [(String, String); 2] {
    let (block, conv) = [(1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3)][i];
    [
        (format!("conv{block}_{conv}_W"), format!("conv{block}_{conv}_b")),
        (
            format!("block{block}_conv{conv}_kernel"),
            format!("block{block}_conv{conv}_bias"),
        ),
    ]
}

/// Archive key of the kernel used for layer `Conv2D_{i+1}` in the
/// `conv*_W` convention.
pub fn vgg_kernel_key(i: usize) -> String {
    vgg_keys(i)[0].0.clone()
}

pub fn vgg_bias_key(i: usize) -> String {
    vgg_keys(i)[0].1.clone()
}

/// Copy the first seven VGG-16 convolutions into Conv2D_1..Conv2D_7 and
/// freeze them when the model config asks for it.
pub fn import_pretrained_encoder(net: &mut Network, archive: &HashMap<String, NpyArray>) -> Result<()> {
    let freeze = net.config().freeze_vgg;
    for (i, layer) in VGG_LAYERS.iter().enumerate() {
        let (kernel, bias) = vgg_keys(i)
            .into_iter()
            .find_map(|(k, b)| Some((archive.get(&k)?, archive.get(&b)?)))
            .ok_or_else(|| Error::Import {
                layer: layer.to_string(),
                reason: format!("archive has no {} / {} entries", vgg_kernel_key(i), vgg_bias_key(i)),
            })?;
        let target = net
            .param(layer, ParamRole::Kernel)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
        let cout = net.param(layer, ParamRole::Bias).map(|p| p.data.len()).unwrap_or(0);
        let cin = target.data.len() / (9 * cout.max(1));
        let expected = [3, 3, cin, cout];
        if kernel.shape != expected || bias.shape != [cout] {
            return Err(Error::Import {
                layer: layer.to_string(),
                reason: format!(
                    "kernel {:?} / bias {:?} in archive, model needs {:?} / [{}]",
                    kernel.shape, bias.shape, expected, cout
                ),
            });
        }
        // (kh, kw, cin, cout) -> (cout, cin, kh, kw)
        let mut w = vec![0.0f32; kernel.data.len()];
        for y in 0..3 {
            for x in 0..3 {
                for ci in 0..cin {
                    for co in 0..cout {
                        w[((co * cin + ci) * 3 + y) * 3 + x] = kernel.data[((y * 3 + x) * cin + ci) * cout + co];
                    }
                }
            }
        }
        net.param_mut(layer, ParamRole::Kernel).expect("checked above").data = w;
        net.param_mut(layer, ParamRole::Bias).expect("bias exists").data = bias.data.clone();
        net.set_trainable(layer, !freeze)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_round_trip() {
        let a = NpyArray {
            shape: vec![2, 3],
            data: vec![1.0, -2.0, 3.5, 0.0, 1e-3, 7.0],
        };
        assert_eq!(parse_npy(&encode_npy(&a)).unwrap(), a);
        let v = NpyArray {
            shape: vec![4],
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        assert_eq!(parse_npy(&encode_npy(&v)).unwrap(), v);
    }

    #[test]
    fn rejects_other_dtypes() {
        let mut bytes = encode_npy(&NpyArray {
            shape: vec![1],
            data: vec![1.0],
        });
        let pos = bytes.windows(3).position(|w| w == b"<f4").unwrap();
        bytes[pos + 2] = b'8';
        assert!(parse_npy(&bytes).is_err());
    }
}
