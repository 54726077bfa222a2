use serde::{Deserialize, Serialize};

use super::clock::SimDuration;

/// Link model: per-message latency plus serialization at the link bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkModel {
    #[serde(default = "default_client_bw")]
    pub client_bandwidth_bps: f64,
    /// `None` is unlimited.
    #[serde(default)]
    pub server_bandwidth_bps: Option<f64>,
    #[serde(default = "default_latency")]
    pub latency_s: f64,
}

fn default_client_bw() -> f64 {
    100e6
}

fn default_latency() -> f64 {
    0.005
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            client_bandwidth_bps: default_client_bw(),
            server_bandwidth_bps: None,
            latency_s: default_latency(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Client,
    Server,
}

impl NetworkModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.client_bandwidth_bps > 0.0 && self.client_bandwidth_bps.is_finite()) {
            return Err("client_bandwidth_bps must be positive".into());
        }
        if let Some(bw) = self.server_bandwidth_bps {
            if !(bw > 0.0 && bw.is_finite()) {
                return Err("server_bandwidth_bps must be positive".into());
            }
        }
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err("latency_s must be non-negative".into());
        }
        Ok(())
    }

    fn bandwidth(&self, link: Link) -> Option<f64> {
        match link {
            Link::Client => Some(self.client_bandwidth_bps),
            Link::Server => self.server_bandwidth_bps,
        }
    }

    /// Seconds to move `bytes` across one side of a link, latency included.
    pub fn transfer_time(&self, bytes: u64, link: Link) -> f64 {
        self.latency_s + self.serialization_time(bytes, link)
    }

    /// Serialization delay alone.
    pub fn serialization_time(&self, bytes: u64, link: Link) -> f64 {
        match self.bandwidth(link) {
            Some(bw) => bytes as f64 * 8.0 / bw,
            None => 0.0,
        }
    }

    /// Server sends one message to each client concurrently. Each client link
    /// runs in parallel; the server's egress serializes all of them.
    pub fn fan_out(&self, sizes: &[u64]) -> SimDuration {
        if sizes.is_empty() {
            return SimDuration::ZERO;
        }
        let per_client = sizes
            .iter()
            .map(|&b| SimDuration::from_secs_f64(self.transfer_time(b, Link::Client)))
            .max()
            .unwrap_or(SimDuration::ZERO);
        let egress: f64 = sizes.iter().map(|&b| self.serialization_time(b, Link::Server)).sum();
        per_client.max(SimDuration::from_secs_f64(self.latency_s + egress))
    }

    /// Clients upload one message each; uploads are serialized into the
    /// server, each paying latency plus its client-link time.
    pub fn fan_in(&self, sizes: &[u64]) -> SimDuration {
        sizes
            .iter()
            .map(|&b| {
                let client = self.serialization_time(b, Link::Client);
                let server = self.serialization_time(b, Link::Server);
                SimDuration::from_secs_f64(self.latency_s + client.max(server))
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_examples() {
        let net = NetworkModel {
            latency_s: 0.0,
            ..NetworkModel::default()
        };
        assert_eq!(net.transfer_time(12_500_000, Link::Client), 1.0);
        assert_eq!(NetworkModel::default().transfer_time(0, Link::Client), 0.005);
        assert_eq!(NetworkModel::default().transfer_time(1 << 30, Link::Server), 0.005);
    }

    #[test]
    fn fan_in_serializes_fan_out_overlaps() {
        let net = NetworkModel::default();
        let one = SimDuration::from_secs_f64(net.transfer_time(1000, Link::Client));
        assert_eq!(net.fan_out(&[1000, 1000, 1000]), one);
        assert_eq!(net.fan_in(&[1000, 1000, 1000]), one + one + one);
        assert_eq!(net.fan_in(&[]), SimDuration::ZERO);
    }

    #[test]
    fn limited_server_egress_bounds_fan_out() {
        let net = NetworkModel {
            server_bandwidth_bps: Some(100e6),
            ..NetworkModel::default()
        };
        let t = net.fan_out(&[12_500_000, 12_500_000]);
        assert_eq!(t, SimDuration::from_secs_f64(2.005));
    }
}
