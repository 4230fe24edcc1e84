//! Text codec for the estimate a server sends to the central processor.
//!
//! One record per line:
//!
//! ```text
//! v1|server_id|n_k|p|theta_1,...,theta_p|vech_1,...,vech_q|crc32
//! ```
//!
//! `vech` is the lower triangle of the variance matrix stacked column by
//! column, `q = p (p + 1) / 2`. Reals are written with 17 significant digits,
//! which round-trips every finite `f64` exactly. The trailing field is the
//! CRC-32 of everything before the final `|`, as 8 lowercase hex digits.

use nalgebra::DVector;
use thiserror::Error;

use crate::aggregate::LocalEstimate;
use crate::numkit::{vech_dim, vech_inv, vech_lower};

pub const PROTOCOL_VERSION: &str = "v1";

const FIELDS: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("message truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch: message says {expected:08x}, payload hashes to {actual:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("unsupported protocol version `{0}`")]
    Version(String),
    #[error("malformed field `{field}`: {reason}")]
    Malformed { field: &'static str, reason: String },
    #[error("declared {field} length {declared} but payload has {actual}")]
    LengthMismatch { field: &'static str, declared: usize, actual: usize },
}

/// A decoded wire record.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateMessage {
    pub version: String,
    pub server_id: u32,
    pub n_k: u64,
    pub p: usize,
    pub theta: Vec<f64>,
    pub vech_sigma: Vec<f64>,
    pub checksum: u32,
}

impl EstimateMessage {
    pub fn from_estimate(est: &LocalEstimate) -> Self {
        let theta = est.theta_star.as_slice().to_vec();
        let vech_sigma = vech_lower(&est.sigma_star);
        let body = body_text(est.server_id, est.n_k, &theta, &vech_sigma);
        EstimateMessage {
            version: PROTOCOL_VERSION.to_string(),
            server_id: est.server_id,
            n_k: est.n_k,
            p: theta.len(),
            theta,
            vech_sigma,
            checksum: crc32fast::hash(body.as_bytes()),
        }
    }

    /// The variance matrix is rebuilt symmetric from its lower triangle.
    pub fn into_estimate(self) -> Result<LocalEstimate, DecodeError> {
        let sigma = vech_inv(&self.vech_sigma, self.p)
            .map_err(|e| DecodeError::Malformed { field: "vech_sigma", reason: e.to_string() })?;
        let est = LocalEstimate::new(self.server_id, self.n_k, DVector::from_vec(self.theta), sigma.into_inner());
        est.map_err(|e| DecodeError::Malformed { field: "estimate", reason: e.to_string() })
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(",")
}

fn body_text(server_id: u32, n_k: u64, theta: &[f64], vech_sigma: &[f64]) -> String {
    format!("{PROTOCOL_VERSION}|{server_id}|{n_k}|{}|{}|{}", theta.len(), join(theta), join(vech_sigma))
}

/// Encodes one estimate as a newline-terminated record.
pub fn encode_message(est: &LocalEstimate) -> Vec<u8> {
    let msg = EstimateMessage::from_estimate(est);
    let body = body_text(msg.server_id, msg.n_k, &msg.theta, &msg.vech_sigma);
    format!("{body}|{:08x}\n", msg.checksum).into_bytes()
}

/// Parses and verifies a record produced by [`encode_message`].
pub fn decode_wire(bytes: &[u8]) -> Result<EstimateMessage, DecodeError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| DecodeError::Malformed { field: "record", reason: format!("not UTF-8: {e}") })?;
    let text = text.strip_suffix('\n').unwrap_or(text);
    let text = text.strip_suffix('\r').unwrap_or(text);

    let version = text.split('|').next().unwrap_or_default();
    if version != PROTOCOL_VERSION {
        return Err(DecodeError::Version(version.to_string()));
    }
    let fields: Vec<&str> = text.split('|').collect();
    if fields.len() < FIELDS {
        return Err(DecodeError::Truncated(format!("{} of {FIELDS} fields present", fields.len())));
    }
    if fields.len() > FIELDS {
        return Err(DecodeError::Malformed {
            field: "record",
            reason: format!("{} fields, expected {FIELDS}", fields.len()),
        });
    }
    let crc_text = fields[6];
    if crc_text.len() < 8 {
        return Err(DecodeError::Truncated(format!("checksum has {} of 8 hex digits", crc_text.len())));
    }
    if crc_text.len() > 8 || !crc_text.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
        return Err(DecodeError::Malformed {
            field: "checksum",
            reason: format!("`{crc_text}` is not 8 lowercase hex digits"),
        });
    }
    let expected = u32::from_str_radix(crc_text, 16).expect("validated hex");
    let body = &text[..text.len() - crc_text.len() - 1];
    let actual = crc32fast::hash(body.as_bytes());
    if expected != actual {
        return Err(DecodeError::Checksum { expected, actual });
    }

    let server_id = parse_int::<u32>(fields[1], "server_id")?;
    let n_k = parse_int::<u64>(fields[2], "n_k")?;
    let p = parse_int::<usize>(fields[3], "p")?;
    let theta = parse_reals(fields[4], "theta")?;
    let vech_sigma = parse_reals(fields[5], "vech_sigma")?;
    if theta.len() != p {
        return Err(DecodeError::LengthMismatch { field: "theta", declared: p, actual: theta.len() });
    }
    let q = p * (p + 1) / 2;
    if vech_sigma.len() != q || vech_dim(vech_sigma.len()) != Some(p) {
        return Err(DecodeError::LengthMismatch { field: "vech_sigma", declared: q, actual: vech_sigma.len() });
    }
    Ok(EstimateMessage { version: version.to_string(), server_id, n_k, p, theta, vech_sigma, checksum: expected })
}

/// [`decode_wire`] followed by conversion back to a [`LocalEstimate`].
pub fn decode_message(bytes: &[u8]) -> Result<LocalEstimate, DecodeError> {
    decode_wire(bytes)?.into_estimate()
}

fn parse_int<T: std::str::FromStr>(s: &str, field: &'static str) -> Result<T, DecodeError>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| DecodeError::Malformed { field, reason: format!("`{s}`: {e}") })
}

fn parse_reals(s: &str, field: &'static str) -> Result<Vec<f64>, DecodeError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|tok| tok.parse::<f64>().map_err(|e| DecodeError::Malformed { field, reason: format!("`{tok}`: {e}") }))
        .collect()
}
