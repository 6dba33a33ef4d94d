//! In-memory RGB-D-semantic frames.

/// Row-major image data for one view.
///
/// `depth` is in meters with `0.0` meaning "no measurement"; `labels` are
/// class ids with `0` reserved for unlabeled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB in `[0, 1]`, length `3 * width * height`.
    pub color: Vec<f64>,
    pub depth: Option<Vec<f64>>,
    pub labels: Option<Vec<u32>>,
}

impl Frame {
    pub fn new(width: usize, height: usize, color: Vec<f64>) -> Self {
        assert_eq!(color.len(), 3 * width * height, "color buffer size");
        Self {
            width,
            height,
            color,
            depth: None,
            labels: None,
        }
    }

    pub fn with_depth(mut self, depth: Vec<f64>) -> Self {
        assert_eq!(depth.len(), self.width * self.height, "depth buffer size");
        self.depth = Some(depth);
        self
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Self {
        assert_eq!(labels.len(), self.width * self.height, "label buffer size");
        self.labels = Some(labels);
        self
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn valid_depth(&self, i: usize) -> Option<f64> {
        let d = self.depth.as_ref()?[i];
        (d.is_finite() && d > 0.0).then_some(d)
    }
}

/// True when a depth sample carries a usable measurement.
pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}
