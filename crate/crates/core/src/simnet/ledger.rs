use std::collections::BTreeMap;

/// Bytes exchanged during one server round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundTraffic {
    pub round: u32,
    pub time_ns: u64,
    /// Encoded bytes of the uploads aggregated in this round.
    pub upload_bytes: u64,
    /// Encoded bytes dispatched to listening clients after the round.
    pub dispatch_bytes: u64,
    pub segments: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UploadRecord {
    pub client: u32,
    pub round: u32,
    pub time_ns: u64,
    pub bytes: u64,
}

/// Byte counters per direction; counters only grow.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrafficLedger {
    bytes_to_server: u64,
    bytes_to_client: u64,
    virtual_time: f64,
    rounds: Vec<RoundTraffic>,
    uploads: Vec<UploadRecord>,
    upload_bytes_by_round: BTreeMap<u32, u64>,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes_to_server(&self) -> u64 {
        self.bytes_to_server
    }

    pub fn bytes_to_client(&self) -> u64 {
        self.bytes_to_client
    }

    /// Seconds of virtual time covered by the ledger.
    pub fn virtual_time(&self) -> f64 {
        self.virtual_time
    }

    pub fn rounds(&self) -> &[RoundTraffic] {
        &self.rounds
    }

    pub fn uploads(&self) -> &[UploadRecord] {
        &self.uploads
    }

    pub fn record_upload(&mut self, client: u32, round: u32, bytes: usize, time_ns: u64) {
        let bytes = bytes as u64;
        self.bytes_to_server += bytes;
        *self.upload_bytes_by_round.entry(round).or_default() += bytes;
        self.uploads.push(UploadRecord {
            client,
            round,
            time_ns,
            bytes,
        });
    }

    /// Closes server round `round` (1-based), which aggregated the uploads
    /// tagged `round - 1`.
    pub fn record_round(&mut self, round: u32, time_ns: u64, dispatch_bytes: usize, listeners: usize, segments: usize) {
        let dispatch_bytes = (dispatch_bytes * listeners) as u64;
        self.bytes_to_client += dispatch_bytes;
        let upload_bytes = self.upload_bytes_by_round.remove(&(round - 1)).unwrap_or(0);
        self.rounds.push(RoundTraffic {
            round,
            time_ns,
            upload_bytes,
            dispatch_bytes,
            segments,
        });
    }

    pub fn set_virtual_time(&mut self, seconds: f64) {
        self.virtual_time = self.virtual_time.max(seconds);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrafficReport {
    pub mbps_to_server: Option<f64>,
    pub mbps_to_client: Option<f64>,
    pub mb_per_update_to_server: Option<f64>,
    pub mb_per_update_to_client: Option<f64>,
}

/// Rates in MB/s (10^6 bytes) over the ledger's virtual time, and MB per
/// server round. Values are absent when their denominator is zero.
pub fn traffic_report(ledger: &TrafficLedger, updates: usize) -> TrafficReport {
    let mb = |b: u64| b as f64 / 1e6;
    let t = ledger.virtual_time();
    let rate = |b: u64| (t > 0.0).then(|| mb(b) / t);
    let per = |b: u64| (updates > 0).then(|| mb(b) / updates as f64);
    TrafficReport {
        mbps_to_server: rate(ledger.bytes_to_server),
        mbps_to_client: rate(ledger.bytes_to_client),
        mb_per_update_to_server: per(ledger.bytes_to_server),
        mb_per_update_to_client: per(ledger.bytes_to_client),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_attribute_their_uploads() {
        let mut l = TrafficLedger::new();
        l.record_upload(1, 0, 602, 10);
        l.record_upload(2, 0, 602, 10);
        l.record_upload(1, 1, 100, 20);
        l.record_round(1, 10, 1000, 1, 1);
        assert_eq!(l.rounds()[0].upload_bytes, 1204);
        assert_eq!(l.bytes_to_server(), 1304);
        assert_eq!(l.bytes_to_client(), 1000);
    }

    #[test]
    fn report_absent_without_rounds_or_time() {
        let l = TrafficLedger::new();
        let r = traffic_report(&l, 0);
        assert_eq!(r.mbps_to_server, None);
        assert_eq!(r.mb_per_update_to_client, None);
        let mut l = TrafficLedger::new();
        l.record_upload(1, 0, 2_000_000, 0);
        l.record_round(1, 0, 1_000_000, 1, 5);
        l.set_virtual_time(4.0);
        let r = traffic_report(&l, 1);
        assert_eq!(r.mbps_to_server, Some(0.5));
        assert_eq!(r.mb_per_update_to_client, Some(1.0));
    }
}
