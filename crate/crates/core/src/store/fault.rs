//! Kill-point injection for crash-atomicity tests.
//!
//! Arming a fault makes the store behave as if the process died at that
//! persistence step: the step is cut short, the call returns
//! [`Error::Crashed`](crate::Error::Crashed), and every later call on the
//! same handle fails the same way. Reopening the directory recovers.

use parking_lot::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultPoint {
    /// Nothing of the record reaches the log.
    BeforeAppend,
    /// Only `keep_per_mille / 1000` of the record's bytes reach the log.
    TornAppend { keep_per_mille: u16 },
    /// The record is durable but the writer dies before acknowledging it.
    AfterAppend,
    /// Dies after writing a blob chunk file, before the pointer exists.
    BlobChunk,
    /// Dies after writing the compacted segment, before the manifest swap.
    CompactBeforeManifest,
    /// Dies after the manifest swap, before old segments are removed.
    CompactAfterManifest,
}

impl FaultPoint {
    fn class(self) -> u8 {
        match self {
            FaultPoint::BeforeAppend | FaultPoint::TornAppend { .. } | FaultPoint::AfterAppend => 0,
            FaultPoint::BlobChunk => 1,
            FaultPoint::CompactBeforeManifest => 2,
            FaultPoint::CompactAfterManifest => 3,
        }
    }

    pub fn name(self) -> String {
        match self {
            FaultPoint::BeforeAppend => "before-append".into(),
            FaultPoint::TornAppend { keep_per_mille } => format!("torn-append-{keep_per_mille}"),
            FaultPoint::AfterAppend => "after-append".into(),
            FaultPoint::BlobChunk => "blob-chunk".into(),
            FaultPoint::CompactBeforeManifest => "compact-before-manifest".into(),
            FaultPoint::CompactAfterManifest => "compact-after-manifest".into(),
        }
    }
}

#[derive(Debug, Default)]
pub struct FaultInjector {
    armed: Mutex<Option<(FaultPoint, u32)>>,
}

impl FaultInjector {
    /// Fires `point` on the `(skip + 1)`-th event of its kind.
    pub fn arm(&self, point: FaultPoint, skip: u32) {
        *self.armed.lock() = Some((point, skip));
    }

    pub fn disarm(&self) {
        *self.armed.lock() = None;
    }

    /// Called at each persistence step of kind `probe`; returns the armed
    /// point if it fires now.
    pub(crate) fn check(&self, probe: FaultPoint) -> Option<FaultPoint> {
        let mut armed = self.armed.lock();
        match *armed {
            Some((point, skip)) if point.class() == probe.class() => {
                if skip == 0 {
                    *armed = None;
                    Some(point)
                } else {
                    *armed = Some((point, skip - 1));
                    None
                }
            }
            _ => None,
        }
    }
}
