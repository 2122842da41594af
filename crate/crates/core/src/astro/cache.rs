use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;

use super::propagate::{check_altitude, check_span, finish, grid_point, walk};
use super::{kepler_to_state, AstroError, Epoch, OrbitRecord, PropagatorConfig, StateVector, Vec3};

const STRIDE: u64 = 64;

/// Memoized integration of one orbit record.
///
/// Grid states every `STRIDE` steps are kept in both directions from the
/// element epoch. A query resumes from the nearest checkpoint, so results are
/// bit-identical to [`super::propagate_j2`].
#[derive(Debug)]
pub struct Trajectory {
    record: OrbitRecord,
    cfg: PropagatorConfig,
    forward: Vec<(Vec3, Vec3)>,
    backward: Vec<(Vec3, Vec3)>,
    decayed: Option<AstroError>,
}

impl Trajectory {
    pub fn new(record: OrbitRecord, cfg: PropagatorConfig) -> Result<Self, AstroError> {
        cfg.check()?;
        record.check()?;
        let s0 = kepler_to_state(&record.elements, record.elements.epoch)?;
        check_altitude(&s0.r, &record.object_id, s0.epoch)?;
        Ok(Self {
            record,
            cfg,
            forward: vec![(s0.r, s0.v)],
            backward: vec![(s0.r, s0.v)],
            decayed: None,
        })
    }

    pub fn record(&self) -> &OrbitRecord {
        &self.record
    }

    pub fn state_at(&mut self, t: Epoch) -> Result<StateVector, AstroError> {
        let epoch = self.record.elements.epoch;
        let span = check_span(epoch, t)?;
        let g = grid_point(span, self.cfg.step_s);
        let h = g.dir * self.cfg.step_s;
        let want = (g.n / STRIDE) as usize;
        let (bstar, cfg) = (self.record.bstar, self.cfg);
        let id = self.record.object_id.clone();
        let points = if g.dir > 0.0 { &mut self.forward } else { &mut self.backward };
        while points.len() <= want {
            if let Some(err) = &self.decayed {
                return Err(err.clone());
            }
            let base = (points.len() as u64 - 1) * STRIDE;
            let (mut r, mut v) = *points.last().expect("seeded");
            match walk(&mut r, &mut v, STRIDE, h, bstar, &cfg, &id, |k| epoch + h * (base + k) as f64) {
                Ok(()) => points.push((r, v)),
                Err(e) => {
                    self.decayed = Some(e.clone());
                    return Err(e);
                }
            }
        }
        let (mut r, mut v) = points[want];
        let base = want as u64 * STRIDE;
        walk(&mut r, &mut v, g.n - base, h, bstar, &cfg, &id, |k| epoch + h * (base + k) as f64)?;
        finish(&r, &v, g.rem, g.dir, bstar, &cfg, &id, t)
    }
}

fn key(record: &OrbitRecord, cfg: &PropagatorConfig) -> Vec<u64> {
    let el = &record.elements;
    let mut k: Vec<u64> = [
        el.a,
        el.e,
        el.i,
        el.raan,
        el.argp,
        el.mean_anomaly,
        el.epoch.seconds(),
        record.bstar,
        cfg.step_s,
    ]
    .iter()
    .map(|x| x.to_bits())
    .collect();
    k.push(cfg.j2 as u64 | (cfg.drag as u64) << 1);
    k
}

/// Thread-safe map from orbit record to its [`Trajectory`].
#[derive(Debug, Default, Clone)]
pub struct TrajectoryCache {
    inner: Arc<Mutex<HashMap<(String, Vec<u64>), Arc<Mutex<Trajectory>>>>>,
}

impl TrajectoryCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state_at(
        &self,
        record: &OrbitRecord,
        cfg: &PropagatorConfig,
        t: Epoch,
    ) -> Result<StateVector, AstroError> {
        let traj = {
            let mut map = self.inner.lock();
            let k = (record.object_id.clone(), key(record, cfg));
            match map.get(&k) {
                Some(t) => t.clone(),
                None => {
                    let t = Arc::new(Mutex::new(Trajectory::new(record.clone(), *cfg)?));
                    map.insert(k, t.clone());
                    t
                }
            }
        };
        let mut guard = traj.lock();
        guard.state_at(t)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
