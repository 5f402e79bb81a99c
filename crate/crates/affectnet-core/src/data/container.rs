//! Raw image container: a small text manifest followed by little-endian
//! float32 planes, the same family of format the checkpoints use.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const VERSION_LINE: &str = "mtanet-images/1";
const END_HEADER: &str = "end-header";

pub fn write_images(
    path: &Path,
    image_size: (usize, usize, usize),
    count: usize,
    data: &[f32],
) -> Result<()> {
    let (c, h, w) = image_size;
    assert_eq!(data.len(), count * c * h * w, "image buffer size");
    let mut bytes = format!(
        "{VERSION_LINE}\ncount = {count}\nimage_size = {c},{h},{w}\n{END_HEADER}\n"
    )
    .into_bytes();
    bytes.reserve(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_images(path: &Path) -> Result<((usize, usize, usize), Vec<f32>)> {
    let bytes = fs::read(path)?;
    let header_end = find_header_end(&bytes).ok_or_else(|| {
        Error::Container(format!("{}: missing '{END_HEADER}' line", path.display()))
    })?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Container(format!("{}: header is not UTF-8", path.display())))?;

    let mut lines = header.lines();
    let version = lines.next().unwrap_or_default();
    if version != VERSION_LINE {
        return Err(Error::Container(format!(
            "{}: unsupported version '{version}' (expected '{VERSION_LINE}')",
            path.display()
        )));
    }
    let mut count = None;
    let mut size = None;
    for line in lines {
        if line == END_HEADER {
            break;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Container(format!(
                "{}: bad manifest line '{line}'",
                path.display()
            )));
        };
        match key.trim() {
            "count" => {
                count = Some(value.trim().parse::<usize>().map_err(|_| {
                    Error::Container(format!("{}: bad count '{value}'", path.display()))
                })?)
            }
            "image_size" => {
                let dims: Vec<usize> = value
                    .trim()
                    .split(',')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| {
                        Error::Container(format!(
                            "{}: bad image_size '{value}'",
                            path.display()
                        ))
                    })?;
                if dims.len() != 3 {
                    return Err(Error::Container(format!(
                        "{}: image_size needs 3 dims",
                        path.display()
                    )));
                }
                size = Some((dims[0], dims[1], dims[2]));
            }
            other => {
                return Err(Error::Container(format!(
                    "{}: unknown manifest key '{other}'",
                    path.display()
                )))
            }
        }
    }
    let count = count
        .ok_or_else(|| Error::Container(format!("{}: manifest lacks count", path.display())))?;
    let size = size.ok_or_else(|| {
        Error::Container(format!("{}: manifest lacks image_size", path.display()))
    })?;

    let payload = &bytes[header_end..];
    let expect = count * size.0 * size.1 * size.2 * 4;
    if payload.len() != expect {
        return Err(Error::Container(format!(
            "{}: payload is {} bytes, manifest implies {expect}",
            path.display(),
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((size, data))
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = format!("{END_HEADER}\n").into_bytes();
    bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|pos| pos + needle.len())
}
