//! Minimal uncompressed MAT v5 writer for double arrays, used to build
//! Duke-shaped fixture files.

use std::io::Write;

const MI_INT8: u32 = 1;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_DOUBLE: u32 = 9;
const MI_MATRIX: u32 = 14;
const MX_DOUBLE_CLASS: u32 = 6;

/// A named double array with MATLAB dimensions and column-major data.
pub struct MatArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl MatArray {
    /// Builds the column-major buffer from a row-major index function.
    pub fn from_fn(name: &str, dims: &[usize], f: impl Fn(&[usize]) -> f64) -> Self {
        let total: usize = dims.iter().product();
        let mut data = Vec::with_capacity(total);
        let mut idx = vec![0; dims.len()];
        for _ in 0..total {
            data.push(f(&idx));
            for (d, i) in idx.iter_mut().enumerate() {
                *i += 1;
                if *i < dims[d] {
                    break;
                }
                *i = 0;
            }
        }
        Self {
            name: name.to_string(),
            dims: dims.to_vec(),
            data,
        }
    }
}

fn element(kind: u32, payload: &[u8], out: &mut Vec<u8>) {
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    while !out.len().is_multiple_of(8) {
        out.push(0);
    }
}

fn matrix(array: &MatArray) -> Vec<u8> {
    let mut body = Vec::new();
    let mut flags = Vec::new();
    flags.extend_from_slice(&MX_DOUBLE_CLASS.to_le_bytes());
    flags.extend_from_slice(&0u32.to_le_bytes());
    element(MI_UINT32, &flags, &mut body);
    let dims: Vec<u8> = array
        .dims
        .iter()
        .flat_map(|&d| (d as i32).to_le_bytes())
        .collect();
    element(MI_INT32, &dims, &mut body);
    element(MI_INT8, array.name.as_bytes(), &mut body);
    let data: Vec<u8> = array.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    element(MI_DOUBLE, &data, &mut body);
    let mut out = Vec::new();
    element(MI_MATRIX, &body, &mut out);
    out
}

pub fn write_mat(path: &std::path::Path, arrays: &[MatArray]) -> std::io::Result<()> {
    let mut header = vec![b' '; 128];
    let text = b"MATLAB 5.0 MAT-file, test fixture";
    header[..text.len()].copy_from_slice(text);
    header[116..124].fill(0);
    header[124..126].copy_from_slice(&0x0100u16.to_le_bytes());
    header[126..128].copy_from_slice(b"IM");
    let mut file = std::fs::File::create(path)?;
    file.write_all(&header)?;
    for a in arrays {
        file.write_all(&matrix(a))?;
    }
    Ok(())
}
