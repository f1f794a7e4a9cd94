use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use usvis_core::{
    bilateral_fast, build_feature_set, BilateralParams, FeatureConfig, FeatureSet, FusionParams,
    Volume,
};

/// Filtering and feature settings applied once per upload.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Processing {
    pub bilateral: BilateralParams,
    pub features: FeatureConfig,
}

/// One uploaded volume with its cached filtered copy and feature set.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub volume: Volume,
    pub filtered: Volume,
    pub features: FeatureSet,
    pub processing: Processing,
    pub created_unix_ms: u128,
    params: Mutex<FusionParams>,
}

impl Session {
    /// Filters `volume` and extracts features. This is the expensive step.
    pub fn prepare(volume: Volume, processing: Processing) -> usvis_core::Result<Self> {
        let filtered = bilateral_fast(&volume, &processing.bilateral)?;
        let features = build_feature_set(&filtered, &processing.features)?;
        Ok(Self::from_parts(volume, filtered, features, processing))
    }

    pub fn from_parts(
        volume: Volume,
        filtered: Volume,
        features: FeatureSet,
        processing: Processing,
    ) -> Self {
        let params = FusionParams::uniform(features.names(), 1.0)
            .expect("a feature set is never empty");
        Self {
            id: uuid::Uuid::new_v4().to_string(),
            volume,
            filtered,
            features,
            processing,
            created_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            params: Mutex::new(params),
        }
    }

    pub fn params(&self) -> FusionParams {
        self.params.lock().unwrap().clone()
    }

    pub fn set_params(&self, params: FusionParams) {
        *self.params.lock().unwrap() = params;
    }
}

/// Least-recently-used session cache.
#[derive(Debug)]
pub struct SessionStore {
    capacity: usize,
    // Most recently used at the back.
    sessions: Mutex<VecDeque<Arc<Session>>>,
}

impl SessionStore {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), sessions: Mutex::new(VecDeque::new()) }
    }

    /// Adds a session, evicting the least recently used one when full.
    pub fn insert(&self, session: Session) -> Arc<Session> {
        let session = Arc::new(session);
        let mut sessions = self.sessions.lock().unwrap();
        while sessions.len() >= self.capacity {
            if let Some(evicted) = sessions.pop_front() {
                log::info!("evicting session {}", evicted.id);
            }
        }
        sessions.push_back(Arc::clone(&session));
        session
    }

    pub fn get(&self, id: &str) -> Option<Arc<Session>> {
        let mut sessions = self.sessions.lock().unwrap();
        let pos = sessions.iter().position(|s| s.id == id)?;
        let session = sessions.remove(pos)?;
        sessions.push_back(Arc::clone(&session));
        Some(session)
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use usvis_core::{Dims, Spacing};

    fn tiny() -> Session {
        let v = Volume::filled(Dims::cube(4), Spacing::ISOTROPIC, 0.5).unwrap();
        let set = FeatureSet::new(v.dims(), vec![("sobel".into(), v.clone())]).unwrap();
        Session::from_parts(v.clone(), v, set, Processing::default())
    }

    #[test]
    fn lru_evicts_oldest_untouched() {
        let store = SessionStore::new(2);
        let a = store.insert(tiny()).id.clone();
        let b = store.insert(tiny()).id.clone();
        assert!(store.get(&a).is_some());
        let c = store.insert(tiny()).id.clone();
        assert_eq!(store.len(), 2);
        assert!(store.get(&b).is_none());
        assert!(store.get(&a).is_some() && store.get(&c).is_some());
    }

    #[test]
    fn default_params_are_uniform() {
        let s = tiny();
        assert_eq!(s.params().weights["sobel"], 1.0);
    }
}
