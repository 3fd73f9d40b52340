//! Streaming tracker: fixed frame-0 template, search crop around the
//! previous prediction, Hanning rescoring and box decoding.

use mst_core::head::{argmax_cell, hanning_rescore};
use mst_core::{BoxXYWH, Scalar, Tensor, Tracker};

use crate::crop::{template_crop, CropWindow, SEARCH_FACTOR};
use crate::error::{HarnessError, Result};
use crate::image::Image;

/// Per-frame tracking state.
pub struct Session<'a, T> {
    tracker: &'a Tracker<T>,
    template: Tensor<T>,
    prev: BoxXYWH,
    frame_size: (f64, f64),
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn start(tracker: &'a Tracker<T>, first: &Image, init: BoxXYWH) -> Result<Self> {
        if !(init.is_finite() && init.w > 0.0 && init.h > 0.0) {
            return Err(HarnessError::Usage(format!("initial box {init:?} has no area")));
        }
        Ok(Self {
            tracker,
            template: template_crop(first, &init, tracker.cfg.template_size).to_tensor(),
            prev: init,
            frame_size: (first.width as f64, first.height as f64),
        })
    }

    pub fn update(&mut self, frame: &Image) -> Result<BoxXYWH> {
        let cfg = &self.tracker.cfg;
        let window = CropWindow::around(&self.prev, SEARCH_FACTOR, cfg.search_size);
        let search = window.sample(frame).to_tensor();
        let maps = self.tracker.predict(&self.template, &search)?;
        let rescored = hanning_rescore(&maps.score, cfg.hanning_weight)?;
        let cell = argmax_cell(&rescored);
        let in_crop = maps.box_at(cell, cfg.search_size as f64).cast::<f64>();
        // crop-pixel box back to frame pixels
        let b = window.to_frame(&in_crop).clamp_to(self.frame_size.0, self.frame_size.1, 1.0);
        self.prev = b;
        Ok(b)
    }
}

/// Tracks `n` frames. `frame(t)` is called once per frame in increasing
/// `t`, so frame `t`'s prediction never sees later frames. Frame 0's
/// prediction is `init`.
pub fn track<T: Scalar>(
    tracker: &Tracker<T>,
    n: usize,
    init: BoxXYWH,
    mut frame: impl FnMut(usize) -> Result<Image>,
) -> Result<Vec<BoxXYWH>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let first = frame(0)?;
    let mut session = Session::start(tracker, &first, init)?;
    let mut out = Vec::with_capacity(n);
    out.push(init);
    for t in 1..n {
        out.push(session.update(&frame(t)?)?);
    }
    Ok(out)
}
