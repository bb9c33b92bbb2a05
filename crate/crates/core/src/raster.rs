//! Minimal float raster with the sampling rules the cubemap path needs:
//! bilinear interpolation with longitude wraparound in `x` and clamping
//! in `y`.

/// Row-major interleaved float image, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        ImageBuf {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * channels);
        ImageBuf {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bilinear sample with both axes clamped to the image border.
    pub fn sample_clamp(&self, x: f64, y: f64, out: &mut [f32]) {
        let fx = (x - 0.5).clamp(0.0, self.width as f64 - 1.0);
        let fy = (y - 0.5).clamp(0.0, self.height as f64 - 1.0);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let tx = (fx - x0 as f64) as f32;
        let ty = (fy - y0 as f64) as f32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        for c in 0..self.channels {
            let top = self.get(x0, y0, c) + (self.get(x1, y0, c) - self.get(x0, y0, c)) * tx;
            let bot = self.get(x0, y1, c) + (self.get(x1, y1, c) - self.get(x0, y1, c)) * tx;
            out[c] = top + (bot - top) * ty;
        }
    }

    /// Bilinear sample at a continuous coordinate where integer pixel `i`
    /// has its center at `i + 0.5`. `x` wraps around the image width
    /// (panorama seam); `y` clamps to the pole rows.
    pub fn sample_wrap_clamp(&self, x: f64, y: f64, out: &mut [f32]) {
        let w = self.width as f64;
        let fx = x - 0.5;
        let fy = (y - 0.5).clamp(0.0, self.height as f64 - 1.0);
        let x0f = fx.floor();
        let y0 = fy.floor() as usize;
        let tx = (fx - x0f) as f32;
        let ty = (fy - y0 as f64) as f32;
        let wrap = |v: f64| -> usize {
            let mut m = v % w;
            if m < 0.0 {
                m += w;
            }
            m as usize % self.width
        };
        let x0 = wrap(x0f);
        let x1 = wrap(x0f + 1.0);
        let y1 = (y0 + 1).min(self.height - 1);
        for c in 0..self.channels {
            let v00 = self.get(x0, y0, c);
            let v10 = self.get(x1, y0, c);
            let v01 = self.get(x0, y1, c);
            let v11 = self.get(x1, y1, c);
            let top = v00 + (v10 - v00) * tx;
            let bot = v01 + (v11 - v01) * tx;
            out[c] = top + (bot - top) * ty;
        }
    }
}
