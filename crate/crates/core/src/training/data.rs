use std::sync::Arc;

use chrono::NaiveDate;

use crate::diffops::{Scalar, Tensor};
use crate::gridio::{Dataset, GridSequence};
use crate::unetnode::{ModelInput, ANCILLARY_CHANNELS};

use super::TrainError;

/// Forecast samples drawn from a dataset, one per issue week `t`:
/// input SIC weeks `t-L+1..=t`, ancillary fields at `t`, targets
/// `t+1..=t+τ`. Invalid pixels read as 0.
#[derive(Clone, Debug)]
pub struct WindowSet<'a> {
    data: &'a Dataset,
    issues: Vec<usize>,
    input_len: usize,
    lead_times: usize,
    mask: Arc<Vec<bool>>,
}

impl<'a> WindowSet<'a> {
    pub fn new(
        data: &'a Dataset,
        issues: Vec<usize>,
        input_len: usize,
        lead_times: usize,
    ) -> Result<Self, TrainError> {
        if input_len == 0 || lead_times == 0 {
            return Err(TrainError::Config("window lengths must be positive".into()));
        }
        if let Some(&t) = issues
            .iter()
            .find(|&&t| t + 1 < input_len || t + lead_times >= data.len())
        {
            return Err(TrainError::Config(format!(
                "issue week {t} does not leave {input_len} input and {lead_times} target weeks"
            )));
        }
        let mask = Arc::new(data.mask.ocean().to_vec());
        Ok(Self {
            data,
            issues,
            input_len,
            lead_times,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.issues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn issues(&self) -> &[usize] {
        &self.issues
    }

    pub fn issue_date(&self, i: usize) -> NaiveDate {
        self.data.sic.date(self.issues[i])
    }

    pub fn dataset(&self) -> &Dataset {
        self.data
    }

    pub fn lead_times(&self) -> usize {
        self.lead_times
    }

    /// Ocean mask shared by every loss evaluation.
    pub fn mask(&self) -> Arc<Vec<bool>> {
        self.mask.clone()
    }

    /// Model input and `N×τ×H×W` target for the samples at positions `idx`.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (ModelInput<T>, Tensor<T>) {
        let (h, w) = (self.data.sic.height(), self.data.sic.width());
        let plane = h * w;
        let n = idx.len();
        let mut x = Tensor::zeros([n, self.input_len, h, w]);
        let mut anc = Tensor::zeros([n, ANCILLARY_CHANNELS, h, w]);
        let mut y = Tensor::zeros([n, self.lead_times, h, w]);
        for (b, &i) in idx.iter().enumerate() {
            let t = self.issues[i];
            fill_input(self.data, t, x.item_mut(b), anc.item_mut(b));
            for (k, chunk) in y.item_mut(b).chunks_mut(plane).enumerate() {
                frame(&self.data.sic, t + 1 + k, chunk);
            }
        }
        (ModelInput { x, ancillary: anc }, y)
    }
}

fn frame<T: Scalar>(seq: &GridSequence, t: usize, out: &mut [T]) {
    for ((o, &v), &ok) in out.iter_mut().zip(seq.frame(t)).zip(seq.frame_valid(t)) {
        *o = if ok { T::lit(v as f64) } else { T::zero() };
    }
}

/// Writes the SIC history ending at `t` into `x` (`L×H×W`) and the
/// ancillary fields at `t` into `anc`.
fn fill_input<T: Scalar>(data: &Dataset, t: usize, x: &mut [T], anc: &mut [T]) {
    let plane = data.sic.height() * data.sic.width();
    let first = t + 1 - x.len() / plane;
    for (l, chunk) in x.chunks_mut(plane).enumerate() {
        frame(&data.sic, first + l, chunk);
    }
    frame(&data.tb, t, &mut anc[..plane]);
    frame(&data.sia_fyi, t, &mut anc[plane..2 * plane]);
    frame(&data.sia_myi, t, &mut anc[2 * plane..]);
}

/// Single-sample model input issued at week `t`. Unlike [`WindowSet`] no
/// target weeks are needed, so `t` may be the last week of the data.
pub fn input_at<T: Scalar>(data: &Dataset, t: usize, input_len: usize) -> Result<ModelInput<T>, TrainError> {
    if input_len == 0 || t + 1 < input_len || t >= data.len() {
        return Err(TrainError::Config(format!(
            "week {t} does not have {input_len} weeks of history in a {}-week dataset",
            data.len()
        )));
    }
    let (h, w) = (data.sic.height(), data.sic.width());
    let mut x = Tensor::zeros([1, input_len, h, w]);
    let mut ancillary = Tensor::zeros([1, ANCILLARY_CHANNELS, h, w]);
    fill_input(data, t, x.item_mut(0), ancillary.item_mut(0));
    Ok(ModelInput { x, ancillary })
}
