use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Client {
    pub id: String,
    /// Row indices owned by this client, ascending.
    pub indices: Vec<usize>,
}

/// Disjoint station-level clients covering a set of rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub clients: Vec<Client>,
}

impl ClientPartition {
    /// One client per distinct station id, ordered lexicographically.
    pub fn by_station<S: AsRef<str>>(station_ids: &[S]) -> Result<ClientPartition> {
        if station_ids.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let mut groups: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
        for (i, s) in station_ids.iter().enumerate() {
            groups.entry(s.as_ref()).or_default().push(i);
        }
        Ok(ClientPartition {
            clients: groups
                .into_iter()
                .map(|(id, indices)| Client {
                    id: id.to_string(),
                    indices,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.indices.len()).collect()
    }

    pub fn total(&self) -> usize {
        self.clients.iter().map(|c| c.indices.len()).sum()
    }

    /// `n_k / Σ n_j` per client.
    pub fn weights(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.clients
            .iter()
            .map(|c| c.indices.len() as f64 / total)
            .collect()
    }
}
