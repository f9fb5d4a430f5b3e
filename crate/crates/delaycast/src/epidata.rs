//! Fetching public surveillance reporting triangles from the Delphi epidata
//! HTTP API, one request per (epiweek, lag) or (epiweek, issue), with
//! retry/backoff and a disk cache keyed by request URL.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::triangle::Season;

/// Environment variable naming the cache directory.
pub const CACHE_DIR_ENV: &str = "DELAYCAST_CACHE_DIR";

/// Minimal HTTP abstraction so tests can run without a network.
pub trait Transport {
    fn get(&self, url: &str) -> Result<String>;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| Error::Fetch(format!("building HTTP client: {e}")))?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str) -> Result<String> {
        let resp = self
            .client
            .get(url)
            .send()
            .map_err(|e| Error::Fetch(format!("GET {url}: {e}")))?;
        if !resp.status().is_success() {
            return Err(Error::Fetch(format!("GET {url}: HTTP {}", resp.status())));
        }
        resp.text()
            .map_err(|e| Error::Fetch(format!("reading body of {url}: {e}")))
    }
}

/// Whether rows are requested by reporting lag or by publication issue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchMode {
    /// `lag=d`: counts as known `d` weeks after the event week.
    Lag,
    /// `issues=YYYYWW`: counts as published in a specific issue.
    Issue,
}

/// One fetch request fan-out: a region, an inclusive epiweek range
/// (`YYYYWW`), and the lag (or issue) list.
#[derive(Debug, Clone)]
pub struct FetchSpec {
    pub region: String,
    pub first_epiweek: u32,
    pub last_epiweek: u32,
    pub lags: Vec<u32>,
    pub mode: FetchMode,
}

/// A fetched triangle cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FetchedCell {
    pub season: Season,
    pub week: u32,
    pub lag: u32,
    pub count: f64,
}

const ENDPOINT: &str = "https://api.delphi.cmu.edu/epidata/fluview/";

/// Epidata client over an injectable transport with a URL-keyed disk cache.
pub struct EpidataClient<T: Transport> {
    transport: T,
    cache_dir: PathBuf,
    /// Sleep between live requests (rate limiting).
    pub request_pause: Duration,
    /// Retries per request.
    pub max_attempts: u32,
    /// Base backoff delay, doubled per retry.
    pub backoff: Duration,
    requests_made: RefCell<u64>,
}

fn cache_file_name(url: &str) -> String {
    let mut hasher = DefaultHasher::new();
    url.hash(&mut hasher);
    format!("epidata_{:016x}.json", hasher.finish())
}

fn epiweeks_in_range(first: u32, last: u32) -> Result<Vec<u32>> {
    if first > last {
        return Err(Error::Fetch(format!("empty epiweek range {first}..{last}")));
    }
    let mut out = Vec::new();
    let (mut year, mut week) = (first / 100, first % 100);
    if week == 0 || week > 53 || last % 100 == 0 || last % 100 > 53 {
        return Err(Error::Fetch("epiweeks must be YYYYWW with WW in 1..=53".into()));
    }
    loop {
        let ew = year * 100 + week;
        if ew > last {
            break;
        }
        out.push(ew);
        week += 1;
        if week > 52 {
            week = 1;
            year += 1;
        }
    }
    Ok(out)
}

impl<T: Transport> EpidataClient<T> {
    pub fn new(transport: T, cache_dir: &Path) -> Self {
        EpidataClient {
            transport,
            cache_dir: cache_dir.to_path_buf(),
            request_pause: Duration::from_millis(100),
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            requests_made: RefCell::new(0),
        }
    }

    /// Number of live (non-cached) requests performed so far.
    pub fn requests_made(&self) -> u64 {
        *self.requests_made.borrow()
    }

    fn get_cached(&self, url: &str) -> Result<String> {
        let path = self.cache_dir.join(cache_file_name(url));
        if let Ok(body) = std::fs::read_to_string(&path) {
            return Ok(body);
        }
        let mut last_err = None;
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            *self.requests_made.borrow_mut() += 1;
            match self.transport.get(url) {
                Ok(body) => {
                    std::fs::create_dir_all(&self.cache_dir)?;
                    std::fs::write(&path, &body)?;
                    if !self.request_pause.is_zero() {
                        std::thread::sleep(self.request_pause);
                    }
                    return Ok(body);
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(Error::Fetch(format!(
            "{url} failed after {} attempts: {}",
            self.max_attempts,
            last_err.unwrap()
        )))
    }

    fn url_for(&self, spec: &FetchSpec, epiweek: u32, lag: u32) -> String {
        match spec.mode {
            FetchMode::Lag => format!(
                "{ENDPOINT}?regions={}&epiweeks={epiweek}&lag={lag}",
                spec.region
            ),
            FetchMode::Issue => format!(
                "{ENDPOINT}?regions={}&epiweeks={epiweek}&issues={lag}",
                spec.region
            ),
        }
    }

    /// Fetch every (epiweek, lag) cell. Failed or missing cells are reported
    /// in the second return value so partial triangles are visible.
    pub fn fetch(&self, spec: &FetchSpec) -> Result<(Vec<FetchedCell>, Vec<String>)> {
        let epiweeks = epiweeks_in_range(spec.first_epiweek, spec.last_epiweek)?;
        let mut cells = Vec::new();
        let mut failures = Vec::new();
        for &ew in &epiweeks {
            for &lag in &spec.lags {
                let url = self.url_for(spec, ew, lag);
                match self.get_cached(&url).and_then(|b| parse_response(&b, ew, lag)) {
                    Ok(Some(cell)) => cells.push(cell),
                    Ok(None) => failures.push(format!("epiweek {ew} lag {lag}: no rows")),
                    Err(e) => failures.push(format!("epiweek {ew} lag {lag}: {e}")),
                }
            }
        }
        Ok((cells, failures))
    }
}

/// Parse one epidata JSON response into a triangle cell. The fluview payload
/// reports `num_ili` per row; `result != 1` signals an API-level failure.
fn parse_response(body: &str, epiweek: u32, lag: u32) -> Result<Option<FetchedCell>> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| Error::Fetch(format!("bad JSON: {e}")))?;
    let result = v.get("result").and_then(|r| r.as_i64()).unwrap_or(0);
    if result == -2 {
        // "no results" — an empty, not failed, cell
        return Ok(None);
    }
    if result != 1 {
        let msg = v
            .get("message")
            .and_then(|m| m.as_str())
            .unwrap_or("unknown error");
        return Err(Error::Fetch(format!("API result {result}: {msg}")));
    }
    let rows = v
        .get("epidata")
        .and_then(|e| e.as_array())
        .ok_or_else(|| Error::Fetch("missing epidata array".into()))?;
    let Some(row) = rows.first() else {
        return Ok(None);
    };
    let count = row
        .get("num_ili")
        .and_then(|c| c.as_f64())
        .ok_or_else(|| Error::Fetch("row lacks num_ili".into()))?;
    Ok(Some(FetchedCell {
        season: (epiweek / 100) as Season,
        week: epiweek % 100,
        lag,
        count,
    }))
}
