//! Domain types shared by the store, the wire codec and every client of a
//! stream: the header contract, sample matrices and event markers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Element type of the sample matrix. Discriminants are the wire codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u32)]
pub enum DataKind {
    Int16 = 6,
    Int32 = 7,
    Float32 = 9,
    Float64 = 10,
}

impl DataKind {
    pub const ALL: [DataKind; 4] = [
        DataKind::Int16,
        DataKind::Int32,
        DataKind::Float32,
        DataKind::Float64,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            6 => Some(DataKind::Int16),
            7 => Some(DataKind::Int32),
            9 => Some(DataKind::Float32),
            10 => Some(DataKind::Float64),
            _ => None,
        }
    }

    /// Bytes per element.
    pub fn size(self) -> usize {
        match self {
            DataKind::Int16 => 2,
            DataKind::Int32 | DataKind::Float32 => 4,
            DataKind::Float64 => 8,
        }
    }
}

/// The stream contract: shape, rate and running counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub n_channels: usize,
    pub sampling_rate_hz: f64,
    pub channel_labels: Option<Vec<String>>,
    pub data_kind: DataKind,
    pub n_samples_total: u64,
    pub n_events_total: u64,
}

impl StreamHeader {
    pub fn new(n_channels: usize, sampling_rate_hz: f64, data_kind: DataKind) -> Self {
        Self {
            n_channels,
            sampling_rate_hz,
            channel_labels: None,
            data_kind,
            n_samples_total: 0,
            n_events_total: 0,
        }
    }

    pub fn with_labels<I, S>(mut self, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.channel_labels = Some(labels.into_iter().map(Into::into).collect());
        self
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.n_channels == 0 {
            return Err("n_channels must be positive".into());
        }
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0) {
            return Err(format!(
                "sampling rate must be positive and finite, got {}",
                self.sampling_rate_hz
            ));
        }
        if let Some(labels) = &self.channel_labels {
            if labels.len() != self.n_channels {
                return Err(format!(
                    "{} channel labels for {} channels",
                    labels.len(),
                    self.n_channels
                ));
            }
            if labels.iter().any(|l| l.contains('\0')) {
                return Err("channel labels must not contain NUL".into());
            }
        }
        Ok(())
    }

    /// Converts seconds to a sample count at this header's rate.
    pub fn seconds_to_samples(&self, seconds: f64) -> i64 {
        (seconds * self.sampling_rate_hz).round() as i64
    }
}

/// Row-major (sample-major, channel-minor) sample storage in one of the
/// supported element types.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleData {
    Int16 { n_channels: usize, values: Vec<i16> },
    Int32 { n_channels: usize, values: Vec<i32> },
    Float32 { n_channels: usize, values: Vec<f32> },
    Float64 { n_channels: usize, values: Vec<f64> },
}

impl SampleData {
    pub fn kind(&self) -> DataKind {
        match self {
            SampleData::Int16 { .. } => DataKind::Int16,
            SampleData::Int32 { .. } => DataKind::Int32,
            SampleData::Float32 { .. } => DataKind::Float32,
            SampleData::Float64 { .. } => DataKind::Float64,
        }
    }

    pub fn n_channels(&self) -> usize {
        match self {
            SampleData::Int16 { n_channels, .. }
            | SampleData::Int32 { n_channels, .. }
            | SampleData::Float32 { n_channels, .. }
            | SampleData::Float64 { n_channels, .. } => *n_channels,
        }
    }

    fn n_values(&self) -> usize {
        match self {
            SampleData::Int16 { values, .. } => values.len(),
            SampleData::Int32 { values, .. } => values.len(),
            SampleData::Float32 { values, .. } => values.len(),
            SampleData::Float64 { values, .. } => values.len(),
        }
    }

    pub fn n_samples(&self) -> usize {
        match self.n_channels() {
            0 => 0,
            c => self.n_values() / c,
        }
    }

    /// True when the value count is a whole number of rows.
    pub fn is_rectangular(&self) -> bool {
        self.n_channels() > 0 && self.n_values() % self.n_channels() == 0
    }

    /// Little-endian bytes of all values, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n_values() * self.kind().size());
        self.write_le_bytes(&mut out);
        out
    }

    pub fn write_le_bytes(&self, out: &mut Vec<u8>) {
        match self {
            SampleData::Int16 { values, .. } => {
                values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
            }
            SampleData::Int32 { values, .. } => {
                values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
            }
            SampleData::Float32 { values, .. } => {
                values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
            }
            SampleData::Float64 { values, .. } => {
                values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
            }
        }
    }

    /// Builds a matrix from little-endian bytes. The byte length must be a
    /// whole number of elements.
    pub fn from_le_bytes(kind: DataKind, n_channels: usize, bytes: &[u8]) -> Option<Self> {
        let size = kind.size();
        if bytes.len() % size != 0 {
            return None;
        }
        let chunks = bytes.chunks_exact(size);
        Some(match kind {
            DataKind::Int16 => SampleData::Int16 {
                n_channels,
                values: chunks.map(|c| i16::from_le_bytes([c[0], c[1]])).collect(),
            },
            DataKind::Int32 => SampleData::Int32 {
                n_channels,
                values: chunks
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            },
            DataKind::Float32 => SampleData::Float32 {
                n_channels,
                values: chunks
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            },
            DataKind::Float64 => SampleData::Float64 {
                n_channels,
                values: chunks
                    .map(|c| {
                        let mut b = [0u8; 8];
                        b.copy_from_slice(c);
                        f64::from_le_bytes(b)
                    })
                    .collect(),
            },
        })
    }

    /// Lossless widening to an `(n_samples, n_channels)` f64 matrix.
    pub fn to_array(&self) -> Array2<f64> {
        let shape = (self.n_samples(), self.n_channels());
        let values: Vec<f64> = match self {
            SampleData::Int16 { values, .. } => values.iter().map(|&v| v as f64).collect(),
            SampleData::Int32 { values, .. } => values.iter().map(|&v| v as f64).collect(),
            SampleData::Float32 { values, .. } => values.iter().map(|&v| v as f64).collect(),
            SampleData::Float64 { values, .. } => values.clone(),
        };
        Array2::from_shape_vec(shape, values).expect("rectangular sample data")
    }

    /// Rows `[begin, end)` as a new matrix.
    pub fn slice_rows(&self, begin: usize, end: usize) -> SampleData {
        let c = self.n_channels();
        let (b, e) = (begin * c, end * c);
        match self {
            SampleData::Int16 { values, .. } => SampleData::Int16 {
                n_channels: c,
                values: values[b..e].to_vec(),
            },
            SampleData::Int32 { values, .. } => SampleData::Int32 {
                n_channels: c,
                values: values[b..e].to_vec(),
            },
            SampleData::Float32 { values, .. } => SampleData::Float32 {
                n_channels: c,
                values: values[b..e].to_vec(),
            },
            SampleData::Float64 { values, .. } => SampleData::Float64 {
                n_channels: c,
                values: values[b..e].to_vec(),
            },
        }
    }

    /// Appends the rows of `other`; panics on kind or width mismatch.
    pub fn extend(&mut self, other: &SampleData) {
        assert_eq!(self.n_channels(), other.n_channels(), "channel mismatch");
        match (self, other) {
            (SampleData::Int16 { values, .. }, SampleData::Int16 { values: o, .. }) => {
                values.extend_from_slice(o)
            }
            (SampleData::Int32 { values, .. }, SampleData::Int32 { values: o, .. }) => {
                values.extend_from_slice(o)
            }
            (SampleData::Float32 { values, .. }, SampleData::Float32 { values: o, .. }) => {
                values.extend_from_slice(o)
            }
            (SampleData::Float64 { values, .. }, SampleData::Float64 { values: o, .. }) => {
                values.extend_from_slice(o)
            }
            _ => panic!("data kind mismatch"),
        }
    }

    pub fn empty(kind: DataKind, n_channels: usize) -> SampleData {
        match kind {
            DataKind::Int16 => SampleData::Int16 { n_channels, values: Vec::new() },
            DataKind::Int32 => SampleData::Int32 { n_channels, values: Vec::new() },
            DataKind::Float32 => SampleData::Float32 { n_channels, values: Vec::new() },
            DataKind::Float64 => SampleData::Float64 { n_channels, values: Vec::new() },
        }
    }
}

/// A contiguous run of samples anchored at an absolute index.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBlock {
    pub start_index: u64,
    pub data: SampleData,
}

impl SampleBlock {
    pub fn end_index(&self) -> u64 {
        self.start_index + self.data.n_samples() as u64
    }
}

/// A typed marker anchored to an absolute sample index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub kind: String,
    pub value: i32,
    pub sample: u64,
    pub offset_samples: i32,
    pub duration_samples: u32,
}

impl Event {
    pub fn marker(value: i32, sample: u64) -> Self {
        Self {
            kind: "marker".into(),
            value,
            sample,
            offset_samples: 0,
            duration_samples: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_kind_codes_round_trip() {
        for kind in DataKind::ALL {
            assert_eq!(DataKind::from_code(kind.code()), Some(kind));
        }
        assert_eq!(DataKind::from_code(0), None);
    }

    #[test]
    fn header_validation() {
        assert!(StreamHeader::new(32, 200.0, DataKind::Float32).validate().is_ok());
        assert!(StreamHeader::new(1, 1.0, DataKind::Float32).validate().is_ok());
        assert!(StreamHeader::new(0, 200.0, DataKind::Float32).validate().is_err());
        assert!(StreamHeader::new(2, 0.0, DataKind::Float32).validate().is_err());
        assert!(StreamHeader::new(2, -5.0, DataKind::Float32).validate().is_err());
        let bad = StreamHeader::new(2, 100.0, DataKind::Int16).with_labels(["a"]);
        assert!(bad.validate().is_err());
        let nul = StreamHeader::new(1, 100.0, DataKind::Int16).with_labels(["a\0b"]);
        assert!(nul.validate().is_err());
    }

    #[test]
    fn bytes_round_trip_every_kind() {
        let blocks = [
            SampleData::Int16 { n_channels: 2, values: vec![-1, 2, i16::MIN, i16::MAX] },
            SampleData::Int32 { n_channels: 2, values: vec![-7, 8, i32::MIN, 1] },
            SampleData::Float32 { n_channels: 1, values: vec![f32::NAN, -0.0, 1.5] },
            SampleData::Float64 { n_channels: 3, values: vec![1e300, -2.5, 0.1] },
        ];
        for b in blocks {
            let bytes = b.to_le_bytes();
            let back = SampleData::from_le_bytes(b.kind(), b.n_channels(), &bytes).unwrap();
            assert_eq!(back.to_le_bytes(), bytes);
        }
    }

    #[test]
    fn slice_and_extend() {
        let mut a = SampleData::Float32 { n_channels: 2, values: vec![0., 1., 2., 3., 4., 5.] };
        assert_eq!(a.n_samples(), 3);
        let mid = a.slice_rows(1, 2);
        assert_eq!(mid, SampleData::Float32 { n_channels: 2, values: vec![2., 3.] });
        a.extend(&mid);
        assert_eq!(a.n_samples(), 4);
        assert_eq!(a.to_array()[[3, 1]], 3.0);
    }
}
