//! Delimited-text ingestion and the binary graph cache.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::graph::{EdgeRecord, InteractionGraph};

/// Column mapping for an interaction log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schema {
    pub user_col: String,
    pub item_col: String,
    pub feature_cols: Vec<String>,
}

impl Schema {
    pub fn new(user_col: impl Into<String>, item_col: impl Into<String>, feature_cols: Vec<String>) -> Self {
        Schema {
            user_col: user_col.into(),
            item_col: item_col.into(),
            feature_cols,
        }
    }
}

/// An ingested graph together with the original string ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub graph: InteractionGraph,
    /// `user_ids[k]` is the raw id of user index `k`.
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub feature_names: Vec<String>,
    /// Rows dropped because their (user, item) pair appeared earlier.
    pub duplicates: usize,
}

impl Ingested {
    pub fn stats(&self) -> GraphStats {
        GraphStats::of(&self.graph)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GraphStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

impl GraphStats {
    pub fn of(graph: &InteractionGraph) -> Self {
        GraphStats {
            users: graph.num_users(),
            items: graph.num_items(),
            interactions: graph.num_edges(),
        }
    }
}

/// Picks tab when the first line contains one, comma otherwise.
pub fn sniff_delimiter(text: &str) -> u8 {
    match text.lines().next() {
        Some(line) if line.contains('\t') => b'\t',
        _ => b',',
    }
}

fn intern(map: &mut HashMap<String, u32>, ids: &mut Vec<String>, key: &str) -> u32 {
    if let Some(&k) = map.get(key) {
        return k;
    }
    let k = ids.len() as u32;
    map.insert(key.to_string(), k);
    ids.push(key.to_string());
    k
}

/// Reads a delimited interaction log with a header row.
///
/// Ids are re-indexed densely in order of first appearance. Repeated
/// (user, item) pairs keep the first row.
pub fn ingest<R: Read>(source: R, schema: &Schema, delimiter: u8) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("header has no column '{name}'"),
        })
    };
    let user_col = column(&schema.user_col)?;
    let item_col = column(&schema.item_col)?;
    let feature_cols = schema
        .feature_cols
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;

    let (mut users, mut items) = (HashMap::new(), HashMap::new());
    let (mut user_ids, mut item_ids) = (Vec::new(), Vec::new());
    let mut seen = std::collections::HashSet::new();
    let mut edges = Vec::new();
    let mut duplicates = 0;
    let mut record = csv::StringRecord::new();
    while reader.read_record(&mut record)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let cell = |k: usize| {
            record.get(k).ok_or_else(|| Error::Parse {
                line,
                message: format!("row has {} fields, column {} missing", record.len(), k + 1),
            })
        };
        let user = cell(user_col)?;
        let item = cell(item_col)?;
        let mut features = Vec::with_capacity(feature_cols.len());
        for (&k, name) in feature_cols.iter().zip(&schema.feature_cols) {
            let raw = cell(k)?;
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column '{name}': '{raw}' is not a number"),
            })?;
            features.push(v);
        }
        let u = intern(&mut users, &mut user_ids, user);
        let i = intern(&mut items, &mut item_ids, item);
        if !seen.insert((u, i)) {
            duplicates += 1;
            continue;
        }
        edges.push(EdgeRecord::new(u, i, features));
    }
    if edges.is_empty() {
        return Err(Error::EmptyInput);
    }
    let graph = InteractionGraph::new(user_ids.len(), item_ids.len(), feature_cols.len(), edges)?;
    Ok(Ingested {
        graph,
        user_ids,
        item_ids,
        feature_names: schema.feature_cols.clone(),
        duplicates,
    })
}

/// Reads a file, choosing the delimiter from its first line.
pub fn ingest_path(path: &std::path::Path, schema: &Schema) -> Result<Ingested> {
    let text = std::fs::read_to_string(path)?;
    ingest(text.as_bytes(), schema, sniff_delimiter(&text))
}

/// Writes the graph back as delimited text with header `user,item,<features>`.
pub fn write_delimited<W: Write>(data: &Ingested, sink: W, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(sink);
    let mut header = vec!["user".to_string(), "item".to_string()];
    header.extend(data.feature_names.iter().cloned());
    w.write_record(&header)?;
    for e in data.graph.edges() {
        let mut row = vec![
            data.user_ids[e.user as usize].clone(),
            data.item_ids[e.item as usize].clone(),
        ];
        row.extend(e.features.iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

const CACHE_MAGIC: &[u8; 4] = b"NBFG";
pub const CACHE_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("graph cache truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Format(format!("graph cache truncated at byte {}", self.pos)));
        }
        Ok(n as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in graph cache".into()))
    }
}

/// Layout: magic, version, then u64 counts (users, items, d_raw, edges),
/// the user, item and feature arrays, then the raw id and feature-name strings.
pub fn write_cache<W: Write>(data: &Ingested, mut w: W) -> Result<()> {
    let g = &data.graph;
    w.write_all(CACHE_MAGIC)?;
    put_u32(&mut w, CACHE_VERSION)?;
    for n in [g.num_users(), g.num_items(), g.d_raw(), g.num_edges()] {
        put_u64(&mut w, n as u64)?;
    }
    for e in g.edges() {
        put_u32(&mut w, e.user)?;
    }
    for e in g.edges() {
        put_u32(&mut w, e.item)?;
    }
    for e in g.edges() {
        for v in &e.features {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for s in data.user_ids.iter().chain(&data.item_ids).chain(&data.feature_names) {
        put_str(&mut w, s)?;
    }
    put_u64(&mut w, data.duplicates as u64)?;
    w.flush()?;
    Ok(())
}

pub fn read_cache<R: Read>(mut r: R) -> Result<Ingested> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4).map_err(|_| Error::Format("not a graph cache".into()))? != CACHE_MAGIC {
        return Err(Error::Format("not a graph cache (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let nu = c.u64()? as usize;
    let ni = c.u64()? as usize;
    let d = c.u64()? as usize;
    let ne = c.len()?;
    let users = (0..ne).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let items = (0..ne).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let mut edges = Vec::with_capacity(ne);
    for k in 0..ne {
        let features = (0..d).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        edges.push(EdgeRecord::new(users[k], items[k], features));
    }
    let user_ids = (0..nu).map(|_| c.string()).collect::<Result<Vec<_>>>()?;
    let item_ids = (0..ni).map(|_| c.string()).collect::<Result<Vec<_>>>()?;
    let feature_names = (0..d).map(|_| c.string()).collect::<Result<Vec<_>>>()?;
    let duplicates = c.u64()? as usize;
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after graph cache".into()));
    }
    let graph = InteractionGraph::new(nu, ni, d, edges)?;
    Ok(Ingested {
        graph,
        user_ids,
        item_ids,
        feature_names,
        duplicates,
    })
}

/// Ids `u0..`, `i0..` and names `f0..` for a graph without raw ids.
pub fn with_default_ids(graph: InteractionGraph) -> Ingested {
    Ingested {
        user_ids: (0..graph.num_users()).map(|k| format!("u{k}")).collect(),
        item_ids: (0..graph.num_items()).map(|k| format!("i{k}")).collect(),
        feature_names: (0..graph.d_raw()).map(|k| format!("f{k}")).collect(),
        duplicates: 0,
        graph,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(features: &[&str]) -> Schema {
        Schema::new("user", "item", features.iter().map(|s| s.to_string()).collect())
    }

    const SAMPLE: &str = "user,item,rating\na,x,5\na,y,3\nb,x,4\n";

    #[test]
    fn three_rows() {
        let g = ingest(SAMPLE.as_bytes(), &schema(&["rating"]), b',').unwrap();
        assert_eq!(g.stats(), GraphStats { users: 2, items: 2, interactions: 3 });
        assert_eq!(g.graph.d_raw(), 1);
        assert_eq!(g.user_ids, ["a", "b"]);
        assert_eq!(g.graph.edge(2), &EdgeRecord::new(1, 0, vec![4.0]));
    }

    #[test]
    fn duplicate_row_dropped() {
        let text = format!("{SAMPLE}a,x,5\n");
        let g = ingest(text.as_bytes(), &schema(&["rating"]), b',').unwrap();
        assert_eq!(g.graph.num_edges(), 3);
        assert_eq!(g.duplicates, 1);
    }

    #[test]
    fn no_feature_columns() {
        let g = ingest(SAMPLE.as_bytes(), &schema(&[]), b',').unwrap();
        assert_eq!(g.graph.d_raw(), 0);
        assert!(g.graph.edges().iter().all(|e| e.features.is_empty()));
    }

    #[test]
    fn bad_number_names_line() {
        let text = "user,item,rating\na,x,5\nb,y,lots\n";
        match ingest(text.as_bytes(), &schema(&["rating"]), b',') {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_row_names_line() {
        let text = "user,item,rating\na,x,5\nb\n";
        match ingest(text.as_bytes(), &schema(&["rating"]), b',') {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_and_missing_column() {
        assert!(matches!(
            ingest("user,item\n".as_bytes(), &schema(&[]), b','),
            Err(Error::EmptyInput)
        ));
        assert!(matches!(
            ingest(SAMPLE.as_bytes(), &schema(&["time"]), b','),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn tabs_are_sniffed() {
        let text = SAMPLE.replace(',', "\t");
        assert_eq!(sniff_delimiter(&text), b'\t');
        let g = ingest(text.as_bytes(), &schema(&["rating"]), b'\t').unwrap();
        assert_eq!(g.graph.num_edges(), 3);
    }

    #[test]
    fn text_round_trip() {
        let g = ingest(SAMPLE.as_bytes(), &schema(&["rating"]), b',').unwrap();
        let mut out = Vec::new();
        write_delimited(&g, &mut out, b',').unwrap();
        let again = ingest(out.as_slice(), &schema(&["rating"]), b',').unwrap();
        assert_eq!(again.graph, g.graph);
        assert_eq!(again.user_ids, g.user_ids);
    }

    #[test]
    fn cache_round_trip_and_rejects() {
        let g = ingest(SAMPLE.as_bytes(), &schema(&["rating"]), b',').unwrap();
        let mut bytes = Vec::new();
        write_cache(&g, &mut bytes).unwrap();
        assert_eq!(read_cache(bytes.as_slice()).unwrap(), g);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_cache(bad.as_slice()), Err(Error::Format(_))));
        let mut newer = bytes.clone();
        newer[4] = 9;
        assert!(matches!(
            read_cache(newer.as_slice()),
            Err(Error::VersionMismatch { found: 9, expected: 1 })
        ));
        assert!(read_cache(&bytes[..bytes.len() - 3]).is_err());
    }
}
