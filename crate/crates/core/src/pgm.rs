//! Binary 8-bit PGM (`P5`) for class-id maps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::ClassMap;

pub fn encode(map: &ClassMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    for (i, &id) in map.data.iter().enumerate() {
        let byte = u8::try_from(id).map_err(|_| {
            Error::Validation(format!("class id {id} at pixel {i} does not fit in 8 bits"))
        })?;
        out.push(byte);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ClassMap> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Length("PGM header ends early".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("expected P5 magic, found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s:?}")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval > 255 {
        return Err(Error::Format(format!("only 8-bit PGM is supported, maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = bytes.get(pos + 1..).unwrap_or(&[]);
    if raster.len() != width * height {
        return Err(Error::Length(format!(
            "PGM raster has {} bytes, header says {width}×{height}",
            raster.len()
        )));
    }
    ClassMap::new(height, width, raster.iter().map(|&b| b as u32).collect())
}

pub fn write(path: &Path, map: &ClassMap) -> Result<()> {
    std::fs::write(path, encode(map)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<ClassMap> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
