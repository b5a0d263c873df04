//! Per-grid geography text: location naming, wiki lookup with fallbacks and
//! a resumable on-disk cache.

pub mod mock;
pub mod wiki;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::GridId;
use crate::ingest::EventTable;
use wiki::{split_sections, PageSections, PageSource};

pub const MISSING_TEXT: &str = "missing";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    GeographySection,
    SummarySection,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationText {
    pub grid: GridId,
    pub location_name: String,
    pub text: String,
    pub source: TextSource,
    pub fetched_at: DateTime<Utc>,
}

impl LocationText {
    pub fn missing(grid: GridId, location_name: &str) -> Self {
        Self {
            grid,
            location_name: location_name.trim().to_string(),
            text: MISSING_TEXT.into(),
            source: TextSource::Missing,
            fetched_at: Utc::now(),
        }
    }

    pub fn is_missing(&self) -> bool {
        self.source == TextSource::Missing
    }
}

/// Most frequent location name among the grid's events; ties go to the
/// lexicographically smallest name.
pub fn resolve_location(table: &EventTable, grid: GridId) -> Result<String> {
    resolve_with_country(table, grid).map(|(name, _)| name)
}

/// The resolved name plus the most frequent country recorded with it.
pub fn resolve_with_country(table: &EventTable, grid: GridId) -> Result<(String, Option<String>)> {
    let mut names: BTreeMap<&str, usize> = BTreeMap::new();
    for e in table.at_grid(grid) {
        *names.entry(e.location_name.as_str()).or_insert(0) += 1;
    }
    // Names iterate in ascending order and only a strictly larger count
    // replaces the running best, which gives the lexicographic tie-break.
    let (name, _) = names
        .iter()
        .fold(None::<(&str, usize)>, |best, (&n, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((n, c)),
        })
        .ok_or_else(|| Error::Lookup(format!("grid {grid} has no events")))?;
    let mut countries: BTreeMap<&str, usize> = BTreeMap::new();
    for e in table.at_grid(grid).filter(|e| e.location_name == name) {
        if let Some(c) = e.country.as_deref() {
            *countries.entry(c).or_insert(0) += 1;
        }
    }
    let country = countries
        .iter()
        .fold(None::<(&str, usize)>, |best, (&n, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((n, c)),
        })
        .map(|(c, _)| c.to_string());
    Ok((name.to_string(), country))
}

/// Alternative page titles tried after the exact name, in order: the name
/// with a parenthesised country suffix, then the top search hit.
fn synonym_titles(name: &str, country: Option<&str>) -> Vec<Candidate> {
    let mut out = Vec::new();
    if let Some(c) = country {
        out.push(Candidate::Title(format!("{name} ({c})")));
    }
    out.push(Candidate::SearchHit);
    out
}

enum Candidate {
    Title(String),
    SearchHit,
}

struct PageCache<'a> {
    source: &'a mut dyn PageSource,
    pages: HashMap<String, Option<PageSections>>,
    search: Option<Option<String>>,
}

impl PageCache<'_> {
    fn page(&mut self, title: &str) -> Result<Option<&PageSections>> {
        if !self.pages.contains_key(title) {
            let extract = self.source.page_extract(title)?;
            self.pages
                .insert(title.to_string(), extract.map(|e| split_sections(&e)));
        }
        Ok(self.pages[title].as_ref())
    }

    fn resolve(&mut self, name: &str, c: &Candidate) -> Result<Option<String>> {
        match c {
            Candidate::Title(t) => Ok(Some(t.clone())),
            Candidate::SearchHit => {
                if self.search.is_none() {
                    self.search = Some(self.source.search_top(name)?);
                }
                Ok(self.search.clone().flatten())
            }
        }
    }
}

/// Looks up geography text for `name` with the documented fallback order:
/// exact Geography, synonym Geography, exact Summary, synonym Summary,
/// then the `"missing"` placeholder.
pub fn fetch_text(
    grid: GridId,
    name: &str,
    country: Option<&str>,
    source: &mut dyn PageSource,
) -> Result<LocationText> {
    let name = name.trim();
    if name.is_empty() {
        return Ok(LocationText::missing(grid, name));
    }
    let mut cache = PageCache {
        source,
        pages: HashMap::new(),
        search: None,
    };
    let synonyms = synonym_titles(name, country);
    let found = |text: String, source| LocationText {
        grid,
        location_name: name.to_string(),
        text,
        source,
        fetched_at: Utc::now(),
    };

    if let Some(g) = cache.page(name)?.and_then(PageSections::geography) {
        return Ok(found(g, TextSource::GeographySection));
    }
    let mut titles = Vec::new();
    for c in &synonyms {
        if let Some(t) = cache.resolve(name, c)? {
            if t != name && !titles.contains(&t) {
                titles.push(t);
            }
        }
    }
    for t in &titles {
        if let Some(g) = cache.page(t)?.and_then(PageSections::geography) {
            return Ok(found(g, TextSource::GeographySection));
        }
    }
    for t in std::iter::once(name).chain(titles.iter().map(String::as_str)) {
        if let Some(s) = cache.page(t)?.and_then(PageSections::summary_text) {
            return Ok(found(s, TextSource::SummarySection));
        }
    }
    Ok(LocationText::missing(grid, name))
}

/// Fetch statistics of the most recent [`build_corpus`] call.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FetchLog {
    pub requested_grids: usize,
    pub cache_hits: usize,
    pub fetched: usize,
    pub http_requests: usize,
    /// Grids whose lookup failed; stored as missing and retried next run.
    pub failed: BTreeSet<GridId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusCache {
    pub entries: BTreeMap<GridId, LocationText>,
    pub manifest: FetchLog,
}

impl CorpusCache {
    pub fn get(&self, grid: GridId) -> Option<&LocationText> {
        self.entries.get(&grid)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries with real text.
    pub fn coverage(&self) -> usize {
        self.entries.values().filter(|t| !t.is_missing()).count()
    }

    fn manifest_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".manifest.json");
        PathBuf::from(p)
    }

    /// Loads a cache written by [`save`](Self::save); a missing file is an
    /// empty cache.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: LocationText = serde_json::from_str(&line)
                .map_err(|e| Error::artifact(path, format!("line {}: {e}", i + 1)))?;
            if (t.source == TextSource::Missing) != (t.text == MISSING_TEXT) || t.text.is_empty() {
                return Err(Error::artifact(
                    path,
                    format!("line {}: source/text mismatch", i + 1),
                ));
            }
            if entries.insert(t.grid, t).is_some() {
                return Err(Error::artifact(
                    path,
                    format!("line {}: duplicate grid", i + 1),
                ));
            }
        }
        let mpath = Self::manifest_path(path);
        let manifest = if mpath.exists() {
            let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            serde_json::from_str(&text)?
        } else {
            FetchLog::default()
        };
        Ok(Self { entries, manifest })
    }

    /// Writes entries ordered by grid, replacing the file atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            for t in self.entries.values() {
                serde_json::to_writer(&mut w, t)?;
                w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
            }
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        let mpath = Self::manifest_path(path);
        fs::write(&mpath, serde_json::to_string_pretty(&self.manifest)?)
            .map_err(|e| Error::io(&mpath, e))
    }
}

/// Ensures every grid in `grids` has a cache entry, fetching only grids that
/// are absent or failed last time. Per-grid lookup failures are logged and
/// stored as missing; only an inconsistent request is an error.
pub fn build_corpus(
    table: &EventTable,
    grids: &BTreeSet<GridId>,
    source: &mut dyn PageSource,
    mut cache: CorpusCache,
    checkpoint: Option<&Path>,
) -> Result<CorpusCache> {
    if grids.is_empty() {
        return Err(Error::Configuration(
            "no grids requested for the text corpus".into(),
        ));
    }
    let previously_failed = std::mem::take(&mut cache.manifest.failed);
    let mut log = FetchLog {
        requested_grids: grids.len(),
        ..FetchLog::default()
    };
    let requests_before = source.requests();
    for &grid in grids {
        let (name, country) = resolve_with_country(table, grid)?;
        // An entry cached under another name came from a different table.
        let cached = cache
            .entries
            .get(&grid)
            .is_some_and(|e| e.location_name == name.trim());
        if cached && !previously_failed.contains(&grid) {
            log.cache_hits += 1;
            continue;
        }
        let entry = match fetch_text(grid, &name, country.as_deref(), source) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("text lookup for grid {grid} ({name:?}) failed: {e}");
                log.failed.insert(grid);
                LocationText::missing(grid, &name)
            }
        };
        cache.entries.insert(grid, entry);
        log.fetched += 1;
        if let Some(p) = checkpoint {
            if log.fetched.is_multiple_of(25) {
                cache.manifest = log.clone();
                cache.save(p)?;
            }
        }
    }
    // Grids outside this request keep their previous failure status.
    log.failed
        .extend(previously_failed.into_iter().filter(|g| !grids.contains(g)));
    log.http_requests = source.requests() - requests_before;
    cache.manifest = log;
    if let Some(p) = checkpoint {
        cache.save(p)?;
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid;
    use crate::ingest::{DisasterType, GeoEvent};

    fn ev(id: usize, name: &str, lat: f64) -> GeoEvent {
        GeoEvent {
            record_id: id.to_string(),
            disaster_type: DisasterType::Flood,
            year: 2000,
            lat,
            lon: 0.5,
            location_name: name.into(),
            country: (name == "Springfield").then(|| "Illinois".to_string()),
            damage_cost: None,
            grid: geogrid::locate(lat, 0.5).unwrap(),
        }
    }

    fn table(names: &[&str]) -> EventTable {
        EventTable::from_events(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| ev(i, n, 0.5))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn resolve_majority_and_ties() {
        let g = geogrid::locate(0.5, 0.5).unwrap();
        assert_eq!(
            resolve_location(&table(&["Boston", "Suffolk", "Boston"]), g).unwrap(),
            "Boston"
        );
        assert_eq!(resolve_location(&table(&["B", "A"]), g).unwrap(), "A");
        assert_eq!(resolve_location(&table(&["Sindh"]), g).unwrap(), "Sindh");
        let other = geogrid::locate(40.0, 40.0).unwrap();
        assert!(matches!(
            resolve_location(&table(&["Sindh"]), other),
            Err(Error::Lookup(_))
        ));
    }

    /// In-memory page source for fallback-order tests.
    struct Pages {
        pages: BTreeMap<&'static str, &'static str>,
        search: Option<&'static str>,
        calls: Vec<String>,
    }

    impl PageSource for Pages {
        fn page_extract(&mut self, title: &str) -> Result<Option<String>> {
            self.calls.push(title.to_string());
            Ok(self.pages.get(title).map(|s| s.to_string()))
        }
        fn search_top(&mut self, query: &str) -> Result<Option<String>> {
            self.calls.push(format!("search:{query}"));
            Ok(self.search.map(str::to_string))
        }
        fn requests(&self) -> usize {
            self.calls.len()
        }
    }

    fn g() -> GridId {
        geogrid::locate(0.5, 0.5).unwrap()
    }

    #[test]
    fn exact_geography_wins() {
        let mut src = Pages {
            pages: [("Boston", "Capital.\n== Geography ==\nHarbor city.")].into(),
            search: None,
            calls: vec![],
        };
        let t = fetch_text(g(), "Boston", None, &mut src).unwrap();
        assert_eq!(t.source, TextSource::GeographySection);
        assert_eq!(t.text, "Harbor city.");
        assert_eq!(src.calls, vec!["Boston"]);
    }

    #[test]
    fn synonym_geography_beats_exact_summary() {
        let mut src = Pages {
            pages: [
                ("Springfield", "A common name."),
                (
                    "Springfield (Illinois)",
                    "Capital.\n== Geography ==\nPrairie.",
                ),
            ]
            .into(),
            search: None,
            calls: vec![],
        };
        let t = fetch_text(g(), "Springfield", Some("Illinois"), &mut src).unwrap();
        assert_eq!(
            (t.source, t.text.as_str()),
            (TextSource::GeographySection, "Prairie.")
        );
    }

    #[test]
    fn summary_then_missing() {
        let mut src = Pages {
            pages: [("Sindh", "Province of Pakistan.\n== History ==\nOld.")].into(),
            search: None,
            calls: vec![],
        };
        let t = fetch_text(g(), "Sindh", None, &mut src).unwrap();
        assert_eq!(
            (t.source, t.text.as_str()),
            (TextSource::SummarySection, "Province of Pakistan.")
        );

        let mut src = Pages {
            pages: [("Gilgit-Baltistan", "== Geography ==\nMountains.")].into(),
            search: Some("Gilgit-Baltistan"),
            calls: vec![],
        };
        let t = fetch_text(g(), "Gilgit", None, &mut src).unwrap();
        assert_eq!(t.source, TextSource::GeographySection);

        let mut src = Pages {
            pages: BTreeMap::new(),
            search: None,
            calls: vec![],
        };
        let t = fetch_text(g(), "Atlantis", None, &mut src).unwrap();
        assert!(t.is_missing());
        assert_eq!(t.text, MISSING_TEXT);
        // Each title is requested once even though it is consulted twice.
        assert_eq!(src.calls, vec!["Atlantis", "search:Atlantis"]);
    }
}
