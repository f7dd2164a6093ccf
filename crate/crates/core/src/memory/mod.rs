//! Persistent knowledge base of condensed trajectories.
//!
//! A knowledge base is a directory holding `memory.sqlite` (one table per
//! image model) and one vector sidecar per store (`gen.vec`, `edit.vec`)
//! indexing original-prompt embeddings by record id.

pub mod index;

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rusqlite::{params, Connection, OptionalExtension, Row};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::EmbeddingVector;
use crate::error::{Error, Result};
use crate::guidance::ANALYSIS_STEP_KEYS;
use index::FlatIndex;

pub const DB_FILE: &str = "memory.sqlite";

/// Knowledge base shared between concurrent runs. All writes go through the
/// mutex, one at a time.
pub type SharedKb = Arc<Mutex<KnowledgeBase>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreId {
    Gen,
    Edit,
}

impl StoreId {
    pub const ALL: [StoreId; 2] = [StoreId::Gen, StoreId::Edit];

    pub fn as_str(&self) -> &'static str {
        match self {
            StoreId::Gen => "gen",
            StoreId::Edit => "edit",
        }
    }

    pub fn table(&self) -> &'static str {
        match self {
            StoreId::Gen => "qwen_image_trajectories",
            StoreId::Edit => "qwen_image_edit_trajectories",
        }
    }

    fn columns(&self) -> &'static [(&'static str, &'static str)] {
        match self {
            StoreId::Gen => &GEN_COLUMNS,
            StoreId::Edit => &EDIT_COLUMNS,
        }
    }

    fn slot(&self) -> usize {
        match self {
            StoreId::Gen => 0,
            StoreId::Edit => 1,
        }
    }
}

impl fmt::Display for StoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StoreId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gen" => Ok(StoreId::Gen),
            "edit" => Ok(StoreId::Edit),
            _ => Err(Error::Config(format!("unknown store {s:?}, expected gen or edit"))),
        }
    }
}

const GEN_COLUMNS: [(&str, &str); 15] = [
    ("id", "INTEGER"),
    ("timestamp", "TEXT"),
    ("image_index", "TEXT"),
    ("original_prompt", "TEXT"),
    ("refined_prompt", "TEXT"),
    ("evaluation_score", "REAL"),
    ("confidence_score", "REAL"),
    ("regeneration_count", "INTEGER"),
    ("trajectory_reasoning", "TEXT"),
    ("step_scores", "TEXT"),
    ("successes", "TEXT"),
    ("pitfalls", "TEXT"),
    ("overall_rating", "REAL"),
    ("config_data", "TEXT"),
    ("process_summary", "TEXT"),
];

const EDIT_COLUMNS: [(&str, &str); 16] = [
    ("id", "INTEGER"),
    ("timestamp", "TEXT"),
    ("image_index", "TEXT"),
    ("original_prompt", "TEXT"),
    ("refined_prompt", "TEXT"),
    ("evaluation_score", "REAL"),
    ("confidence_score", "REAL"),
    ("regeneration_count", "INTEGER"),
    ("reference_image", "TEXT"),
    ("trajectory_reasoning", "TEXT"),
    ("step_scores", "TEXT"),
    ("successes", "TEXT"),
    ("pitfalls", "TEXT"),
    ("overall_rating", "REAL"),
    ("config_data", "TEXT"),
    ("process_summary", "TEXT"),
];

fn create_sql(store: StoreId) -> String {
    let cols: Vec<String> = store
        .columns()
        .iter()
        .map(|(name, ty)| match *name {
            "id" => "id INTEGER PRIMARY KEY AUTOINCREMENT".to_string(),
            "timestamp" => "timestamp TEXT NOT NULL".to_string(),
            _ => format!("{name} {ty}"),
        })
        .collect();
    format!(
        "CREATE TABLE IF NOT EXISTS {} (\n    {}\n)",
        store.table(),
        cols.join(",\n    ")
    )
}

/// One condensed trajectory as stored in either table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<i64>,
    pub timestamp: String,
    pub image_index: String,
    pub original_prompt: String,
    pub refined_prompt: String,
    pub evaluation_score: f64,
    pub confidence_score: f64,
    pub regeneration_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_image: Option<String>,
    pub trajectory_reasoning: String,
    pub step_scores: String,
    pub successes: String,
    pub pitfalls: String,
    pub overall_rating: f64,
    pub config_data: String,
    pub process_summary: String,
}

fn decode_map(field: &str, text: &str) -> std::result::Result<serde_json::Map<String, Value>, String> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(format!("{field} is not a JSON object")),
        Err(e) => Err(format!("{field} is not valid JSON: {e}")),
    }
}

impl TrajectoryRecord {
    /// Checks the record invariants for `store` with at most `max_edits` edits.
    pub fn validate(&self, store: StoreId, max_edits: u32) -> Result<()> {
        let fail = |m: String| Err(Error::InvariantViolation(m));
        if chrono::DateTime::parse_from_rfc3339(&self.timestamp).is_err() {
            return fail(format!("timestamp {:?} is not ISO-8601", self.timestamp));
        }
        if self.regeneration_count > max_edits {
            return fail(format!(
                "regeneration_count {} exceeds the edit budget {max_edits}",
                self.regeneration_count
            ));
        }
        match (store, &self.reference_image) {
            (StoreId::Gen, Some(_)) => return fail("GEN records carry no reference_image".into()),
            (StoreId::Edit, None) => return fail("EDIT records require a reference_image".into()),
            _ => {}
        }
        if !(1.0..=10.0).contains(&self.overall_rating) {
            return fail(format!("overall_rating {} is outside [1, 10]", self.overall_rating));
        }
        if !self.evaluation_score.is_finite() || !self.confidence_score.is_finite() {
            return fail("scores must be finite".into());
        }
        let expected: BTreeSet<&str> = ANALYSIS_STEP_KEYS.iter().copied().collect();
        for (field, text) in [
            ("step_scores", &self.step_scores),
            ("successes", &self.successes),
            ("pitfalls", &self.pitfalls),
        ] {
            let m = decode_map(field, text).map_err(Error::InvariantViolation)?;
            let keys: BTreeSet<&str> = m.keys().map(String::as_str).collect();
            if keys != expected {
                return fail(format!("{field} keys {keys:?} differ from {expected:?}"));
            }
        }
        decode_map("config_data", &self.config_data).map_err(Error::InvariantViolation)?;
        Ok(())
    }

    fn from_row(store: StoreId, row: &Row<'_>) -> rusqlite::Result<Self> {
        Ok(Self {
            id: Some(row.get("id")?),
            timestamp: row.get("timestamp")?,
            image_index: row.get::<_, Option<String>>("image_index")?.unwrap_or_default(),
            original_prompt: row.get::<_, Option<String>>("original_prompt")?.unwrap_or_default(),
            refined_prompt: row.get::<_, Option<String>>("refined_prompt")?.unwrap_or_default(),
            evaluation_score: row.get::<_, Option<f64>>("evaluation_score")?.unwrap_or_default(),
            confidence_score: row.get::<_, Option<f64>>("confidence_score")?.unwrap_or_default(),
            regeneration_count: row.get::<_, Option<u32>>("regeneration_count")?.unwrap_or_default(),
            reference_image: match store {
                StoreId::Gen => None,
                StoreId::Edit => Some(row.get::<_, Option<String>>("reference_image")?.unwrap_or_default()),
            },
            trajectory_reasoning: row.get::<_, Option<String>>("trajectory_reasoning")?.unwrap_or_default(),
            step_scores: row.get::<_, Option<String>>("step_scores")?.unwrap_or_default(),
            successes: row.get::<_, Option<String>>("successes")?.unwrap_or_default(),
            pitfalls: row.get::<_, Option<String>>("pitfalls")?.unwrap_or_default(),
            overall_rating: row.get::<_, Option<f64>>("overall_rating")?.unwrap_or_default(),
            config_data: row.get::<_, Option<String>>("config_data")?.unwrap_or_default(),
            process_summary: row.get::<_, Option<String>>("process_summary")?.unwrap_or_default(),
        })
    }
}

/// A retrieved neighbor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub record: TrajectoryRecord,
    pub similarity: f64,
}

impl RankedHit {
    pub fn id(&self) -> i64 {
        self.record.id.unwrap_or_default()
    }
}

pub struct KnowledgeBase {
    dir: PathBuf,
    conn: Connection,
    dim: usize,
    max_edits: u32,
    indexes: [FlatIndex; 2],
}

impl fmt::Debug for KnowledgeBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KnowledgeBase")
            .field("dir", &self.dir)
            .field("dim", &self.dim)
            .field("max_edits", &self.max_edits)
            .finish()
    }
}

impl KnowledgeBase {
    /// Opens or creates the knowledge base in directory `path` with embedding
    /// dimension `dim`.
    pub fn open(path: &Path, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Precondition("embedding dimension must be positive".into()));
        }
        std::fs::create_dir_all(path)?;
        let conn = Connection::open(path.join(DB_FILE))?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        for store in StoreId::ALL {
            conn.execute(&create_sql(store), [])?;
            check_schema(&conn, store)?;
        }
        let mut kb = Self {
            dir: path.to_path_buf(),
            conn,
            dim,
            max_edits: 2,
            indexes: [FlatIndex::new(dim), FlatIndex::new(dim)],
        };
        for store in StoreId::ALL {
            let vec_path = kb.vec_path(store);
            if vec_path.exists() {
                let idx = FlatIndex::load(&vec_path)?;
                if idx.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: idx.dim(),
                    });
                }
                for id in idx.ids() {
                    if !kb.contains(store, id)? {
                        return Err(Error::CorruptStore(format!(
                            "{} indexes id {id} which is not in the store",
                            vec_path.display()
                        )));
                    }
                }
                kb.indexes[store.slot()] = idx;
            } else {
                kb.indexes[store.slot()].save(&vec_path)?;
            }
        }
        Ok(kb)
    }

    /// Opens an existing knowledge base at the dimension recorded in its
    /// sidecars. Fails with `IoError` when `path` is missing.
    pub fn open_existing(path: &Path) -> Result<Self> {
        if !path.join(DB_FILE).is_file() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no knowledge base at {}", path.display()),
            )));
        }
        let dim = StoreId::ALL
            .iter()
            .map(|s| path.join(format!("{}.vec", s.as_str())))
            .find(|p| p.exists())
            .map(|p| stored_dim(&p))
            .transpose()?
            .ok_or_else(|| Error::CorruptStore(format!("{} has no vector sidecar", path.display())))?;
        Self::open(path, dim)
    }

    pub fn into_shared(self) -> SharedKb {
        Arc::new(Mutex::new(self))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Edit budget enforced on `regeneration_count` (default 2).
    pub fn set_max_edits(&mut self, e: u32) {
        self.max_edits = e;
    }

    pub fn max_edits(&self) -> u32 {
        self.max_edits
    }

    pub fn vec_path(&self, store: StoreId) -> PathBuf {
        self.dir.join(format!("{}.vec", store.as_str()))
    }

    pub fn append_trajectory(&mut self, store: StoreId, rec: &TrajectoryRecord) -> Result<i64> {
        rec.validate(store, self.max_edits)?;
        self.insert(store, rec, None)
    }

    fn insert(&mut self, store: StoreId, rec: &TrajectoryRecord, id: Option<i64>) -> Result<i64> {
        let names: Vec<&str> = store.columns().iter().map(|c| c.0).collect();
        let placeholders: Vec<String> = (1..=names.len()).map(|i| format!("?{i}")).collect();
        let sql = format!(
            "INSERT INTO {} ({}) VALUES ({})",
            store.table(),
            names.join(", "),
            placeholders.join(", ")
        );
        let mut values: Vec<rusqlite::types::Value> = vec![
            id.map_or(rusqlite::types::Value::Null, rusqlite::types::Value::Integer),
            rec.timestamp.clone().into(),
            rec.image_index.clone().into(),
            rec.original_prompt.clone().into(),
            rec.refined_prompt.clone().into(),
            rec.evaluation_score.into(),
            rec.confidence_score.into(),
            i64::from(rec.regeneration_count).into(),
        ];
        if store == StoreId::Edit {
            values.push(rec.reference_image.clone().unwrap_or_default().into());
        }
        values.extend([
            rec.trajectory_reasoning.clone().into(),
            rec.step_scores.clone().into(),
            rec.successes.clone().into(),
            rec.pitfalls.clone().into(),
            rec.overall_rating.into(),
            rec.config_data.clone().into(),
            rec.process_summary.clone().into(),
        ]);
        self.conn
            .execute(&sql, rusqlite::params_from_iter(values))?;
        Ok(self.conn.last_insert_rowid())
    }

    pub fn contains(&self, store: StoreId, id: i64) -> Result<bool> {
        let found: Option<i64> = self
            .conn
            .query_row(
                &format!("SELECT id FROM {} WHERE id = ?1", store.table()),
                params![id],
                |r| r.get(0),
            )
            .optional()?;
        Ok(found.is_some())
    }

    pub fn get(&self, store: StoreId, id: i64) -> Result<TrajectoryRecord> {
        self.conn
            .query_row(
                &format!("SELECT * FROM {} WHERE id = ?1", store.table()),
                params![id],
                |r| TrajectoryRecord::from_row(store, r),
            )
            .optional()?
            .ok_or(Error::UnknownId(id))
    }

    /// All records of a store in ascending id order.
    pub fn records(&self, store: StoreId) -> Result<Vec<TrajectoryRecord>> {
        let mut stmt = self
            .conn
            .prepare(&format!("SELECT * FROM {} ORDER BY id", store.table()))?;
        let rows = stmt.query_map([], |r| TrajectoryRecord::from_row(store, r))?;
        Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
    }

    pub fn index_embedding(&mut self, store: StoreId, id: i64, v: &EmbeddingVector) -> Result<()> {
        self.index_embeddings(store, &[(id, v.clone())])
    }

    /// Indexes several vectors with a single sidecar write. Nothing is
    /// indexed if any entry is invalid.
    pub fn index_embeddings(&mut self, store: StoreId, entries: &[(i64, EmbeddingVector)]) -> Result<()> {
        let mut next = self.indexes[store.slot()].clone();
        for (id, v) in entries {
            if v.dim() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    actual: v.dim(),
                });
            }
            if !self.contains(store, *id)? {
                return Err(Error::UnknownId(*id));
            }
            next.upsert(*id, v)?;
        }
        next.save(&self.vec_path(store))?;
        self.indexes[store.slot()] = next;
        Ok(())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn index(&self, store: StoreId) -> &FlatIndex {
        &self.indexes[store.slot()]
    }

    /// Exact top-`k` neighbors by inner product, ties by ascending id.
    pub fn retrieve_similar(&self, store: StoreId, q: &EmbeddingVector, k: usize) -> Result<Vec<RankedHit>> {
        if k == 0 {
            return Err(Error::Precondition("k must be at least 1".into()));
        }
        self.indexes[store.slot()]
            .search(q, k)?
            .into_iter()
            .map(|(id, similarity)| {
                Ok(RankedHit {
                    record: self.get(store, id)?,
                    similarity,
                })
            })
            .collect()
    }

    pub fn trajectory_count(&self, store: StoreId) -> Result<usize> {
        let n: i64 = self.conn.query_row(
            &format!("SELECT COUNT(*) FROM {}", store.table()),
            [],
            |r| r.get(0),
        )?;
        Ok(n as usize)
    }

    /// Writes one JSON object per record, ordered by id, and returns the count.
    pub fn export_trajectories(&self, store: StoreId, out: &Path) -> Result<usize> {
        let records = self.records(store)?;
        let mut w = BufWriter::new(std::fs::File::create(out)?);
        for rec in &records {
            serde_json::to_writer(&mut w, rec).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(records.len())
    }

    /// Loads an export file, keeping the exported ids. Records are validated
    /// before anything is written; the whole import is one transaction.
    pub fn import_trajectories(&mut self, store: StoreId, path: &Path) -> Result<usize> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (n, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| {
                Error::InvariantViolation(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            rec.validate(store, self.max_edits)?;
            records.push(rec);
        }
        self.conn.execute_batch("BEGIN")?;
        let result = records
            .iter()
            .try_for_each(|r| self.insert(store, r, r.id).map(drop));
        match result {
            Ok(()) => {
                self.conn.execute_batch("COMMIT")?;
                Ok(records.len())
            }
            Err(e) => {
                self.conn.execute_batch("ROLLBACK")?;
                Err(e)
            }
        }
    }
}

/// Dimension stored in a sidecar header.
fn stored_dim(path: &Path) -> Result<usize> {
    use std::io::Read;
    let mut head = [0u8; 8];
    std::fs::File::open(path)?
        .read_exact(&mut head)
        .map_err(|_| Error::CorruptStore(format!("{}: truncated header", path.display())))?;
    if &head[..4] != index::MAGIC {
        return Err(Error::CorruptStore(format!("{}: bad header", path.display())));
    }
    Ok(u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize)
}

fn check_schema(conn: &Connection, store: StoreId) -> Result<()> {
    let mut stmt = conn.prepare(&format!("PRAGMA table_info({})", store.table()))?;
    let actual: Vec<(String, String)> = stmt
        .query_map([], |r| Ok((r.get::<_, String>(1)?, r.get::<_, String>(2)?)))?
        .collect::<rusqlite::Result<_>>()?;
    let expected: Vec<(String, String)> = store
        .columns()
        .iter()
        .map(|(n, t)| (n.to_string(), t.to_string()))
        .collect();
    let normalized: Vec<(String, String)> = actual
        .into_iter()
        .map(|(n, t)| (n, t.to_ascii_uppercase()))
        .collect();
    if normalized != expected {
        let names: Vec<&str> = normalized.iter().map(|c| c.0.as_str()).collect();
        return Err(Error::CorruptStore(format!(
            "table {} has columns {names:?}, expected the {} schema",
            store.table(),
            store
        )));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    pub(crate) fn sample_record(store: StoreId, prompt: &str) -> TrajectoryRecord {
        let keyed = |v: Value| {
            let m: serde_json::Map<String, Value> =
                ANALYSIS_STEP_KEYS.iter().map(|k| (k.to_string(), v.clone())).collect();
            Value::Object(m).to_string()
        };
        TrajectoryRecord {
            id: None,
            timestamp: "2026-01-02T03:04:05.678Z".into(),
            image_index: "run/intermediate_0.png".into(),
            original_prompt: prompt.into(),
            refined_prompt: format!("{prompt}, detailed"),
            evaluation_score: 8.25,
            confidence_score: 5.0,
            regeneration_count: if store == StoreId::Edit { 1 } else { 0 },
            reference_image: (store == StoreId::Edit).then(|| "run/intermediate_0.png".to_string()),
            trajectory_reasoning: "fine".into(),
            step_scores: keyed(json!(7)),
            successes: keyed(json!("ok")),
            pitfalls: keyed(json!("none")),
            overall_rating: 7.0,
            config_data: json!({"tau": 8.0}).to_string(),
            process_summary: "summary".into(),
        }
    }

    fn unit(v: Vec<f32>) -> EmbeddingVector {
        EmbeddingVector::normalized(v).unwrap()
    }

    #[test]
    fn fresh_kb_has_exact_columns_and_no_rows() {
        let dir = tempfile::tempdir().unwrap();
        let kb = KnowledgeBase::open(dir.path(), 4).unwrap();
        for s in StoreId::ALL {
            assert_eq!(kb.trajectory_count(s).unwrap(), 0);
        }
        let cols: Vec<String> = kb
            .conn
            .prepare("PRAGMA table_info(qwen_image_edit_trajectories)")
            .unwrap()
            .query_map([], |r| r.get(1))
            .unwrap()
            .map(|r| r.unwrap())
            .collect();
        assert_eq!(cols[8], "reference_image");
        assert_eq!(cols.len(), 16);
        assert!(dir.path().join("gen.vec").exists());
        assert!(dir.path().join("edit.vec").exists());
    }

    #[test]
    fn ids_increase_and_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = {
            let mut kb = KnowledgeBase::open(dir.path(), 4).unwrap();
            let a = kb.append_trajectory(StoreId::Gen, &sample_record(StoreId::Gen, "a cat")).unwrap();
            let b = kb.append_trajectory(StoreId::Gen, &sample_record(StoreId::Gen, "a dog")).unwrap();
            kb.index_embedding(StoreId::Gen, a, &unit(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
            (a, b)
        };
        assert_eq!(b, a + 1);
        let kb = KnowledgeBase::open(dir.path(), 4).unwrap();
        assert_eq!(kb.trajectory_count(StoreId::Gen).unwrap(), 2);
        let rec = kb.get(StoreId::Gen, b).unwrap();
        assert_eq!(rec.original_prompt, "a dog");
        assert_eq!(kb.index(StoreId::Gen).len(), 1);
    }

    #[test]
    fn missing_column_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        {
            let conn = Connection::open(dir.path().join(DB_FILE)).unwrap();
            let sql = create_sql(StoreId::Gen).replace(",\n    process_summary TEXT", "");
            conn.execute(&sql, []).unwrap();
        }
        let err = KnowledgeBase::open(dir.path(), 4).unwrap_err();
        assert!(matches!(err, Error::CorruptStore(_)), "{err:?}");
    }

    #[test]
    fn sidecar_dimension_must_match() {
        let dir = tempfile::tempdir().unwrap();
        KnowledgeBase::open(dir.path(), 4).unwrap();
        assert!(matches!(
            KnowledgeBase::open(dir.path(), 8),
            Err(Error::DimensionMismatch { expected: 8, actual: 4 })
        ));
    }

    #[test]
    fn invariants_enforced_on_append() {
        let dir = tempfile::tempdir().unwrap();
        let mut kb = KnowledgeBase::open(dir.path(), 4).unwrap();
        let mut r = sample_record(StoreId::Edit, "x");
        r.regeneration_count = 3;
        assert!(matches!(kb.append_trajectory(StoreId::Edit, &r), Err(Error::InvariantViolation(_))));
        let with_ref = sample_record(StoreId::Edit, "x");
        assert!(kb.append_trajectory(StoreId::Gen, &with_ref).is_err());
        let mut no_ref = sample_record(StoreId::Edit, "x");
        no_ref.reference_image = None;
        assert!(kb.append_trajectory(StoreId::Edit, &no_ref).is_err());
        let mut bad_ts = sample_record(StoreId::Gen, "x");
        bad_ts.timestamp = "yesterday".into();
        assert!(kb.append_trajectory(StoreId::Gen, &bad_ts).is_err());
        let mut bad_keys = sample_record(StoreId::Gen, "x");
        bad_keys.pitfalls = json!({"s_cre": "x"}).to_string();
        assert!(kb.append_trajectory(StoreId::Gen, &bad_keys).is_err());
        assert_eq!(kb.trajectory_count(StoreId::Gen).unwrap(), 0);
        assert_eq!(kb.trajectory_count(StoreId::Edit).unwrap(), 0);
    }

    #[test]
    fn index_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut kb = KnowledgeBase::open(dir.path(), 4).unwrap();
        let id = kb.append_trajectory(StoreId::Gen, &sample_record(StoreId::Gen, "x")).unwrap();
        assert!(matches!(
            kb.index_embedding(StoreId::Gen, id, &unit(vec![1.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            kb.index_embedding(StoreId::Gen, id + 10, &unit(vec![1.0, 0.0, 0.0, 0.0])),
            Err(Error::UnknownId(_))
        ));
        // id exists only in GEN
        assert!(kb.index_embedding(StoreId::Edit, id, &unit(vec![1.0, 0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn self_similarity_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut kb = KnowledgeBase::open(dir.path(), 3).unwrap();
        let vs = [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.5, 0.5, 0.7]];
        let mut ids = Vec::new();
        for (i, v) in vs.iter().enumerate() {
            let id = kb.append_trajectory(StoreId::Gen, &sample_record(StoreId::Gen, &format!("p{i}"))).unwrap();
            kb.index_embedding(StoreId::Gen, id, &unit(v.clone())).unwrap();
            ids.push(id);
        }
        let hits = kb.retrieve_similar(StoreId::Gen, &unit(vs[2].clone()), 5).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].id(), ids[2]);
        assert!((hits[0].similarity - 1.0).abs() < 1e-6);
        assert_eq!(hits[0].record.original_prompt, "p2");
        assert!(kb.retrieve_similar(StoreId::Gen, &unit(vs[0].clone()), 0).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut kb = KnowledgeBase::open(&dir.path().join("a"), 4).unwrap();
        let empty = dir.path().join("empty.jsonl");
        assert_eq!(kb.export_trajectories(StoreId::Edit, &empty).unwrap(), 0);
        assert_eq!(std::fs::read(&empty).unwrap().len(), 0);
        for p in ["one", "two", "three"] {
            kb.append_trajectory(StoreId::Edit, &sample_record(StoreId::Edit, p)).unwrap();
        }
        let out = dir.path().join("edit.jsonl");
        assert_eq!(kb.export_trajectories(StoreId::Edit, &out).unwrap(), 3);
        let first: Value = serde_json::from_str(std::fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
        let keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected: Vec<&str> = EDIT_COLUMNS.iter().map(|c| c.0).collect();
        expected.sort();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(sorted, expected);

        let mut kb2 = KnowledgeBase::open(&dir.path().join("b"), 4).unwrap();
        assert_eq!(kb2.import_trajectories(StoreId::Edit, &out).unwrap(), 3);
        assert_eq!(kb2.records(StoreId::Edit).unwrap(), kb.records(StoreId::Edit).unwrap());
        // re-import collides on ids and leaves the store unchanged
        assert!(kb2.import_trajectories(StoreId::Edit, &out).is_err());
        assert_eq!(kb2.trajectory_count(StoreId::Edit).unwrap(), 3);
    }

    #[test]
    fn exact_against_brute_force_1000() {
        let dir = tempfile::tempdir().unwrap();
        let dim = 16;
        let mut kb = KnowledgeBase::open(dir.path(), dim).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rand_unit = |rng: &mut ChaCha8Rng| unit((0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let mut stored = Vec::new();
        kb.conn.execute_batch("BEGIN").unwrap();
        for i in 0..1000 {
            let id = kb.insert(StoreId::Gen, &sample_record(StoreId::Gen, &format!("p{i}")), None).unwrap();
            let v = rand_unit(&mut rng);
            kb.indexes[0].upsert(id, &v).unwrap();
            stored.push((id, v));
        }
        kb.conn.execute_batch("COMMIT").unwrap();
        for _ in 0..20 {
            let q = rand_unit(&mut rng);
            let mut oracle: Vec<(i64, f64)> = stored
                .iter()
                .map(|(id, v)| (*id, v.values().iter().zip(q.values()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()))
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let hits = kb.retrieve_similar(StoreId::Gen, &q, 5).unwrap();
            let got: Vec<i64> = hits.iter().map(RankedHit::id).collect();
            let want: Vec<i64> = oracle[..5].iter().map(|h| h.0).collect();
            assert_eq!(got, want);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn retrieval_matches_scan(
            vecs in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..40),
            q in prop::collection::vec(-1.0f32..1.0, 4),
            k in 1usize..50,
        ) {
            prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
            let mut idx = FlatIndex::new(4);
            let mut stored = Vec::new();
            for (i, v) in vecs.into_iter().enumerate() {
                if v.iter().all(|x| x.abs() < 1e-3) { continue; }
                let u = unit(v);
                idx.upsert(i as i64 + 1, &u).unwrap();
                stored.push((i as i64 + 1, u));
            }
            let q = unit(q);
            let mut oracle: Vec<(i64, f64)> = stored.iter().map(|(id, v)| (*id, q.dot(v.values()))).collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            oracle.truncate(k);
            let got = idx.search(&q, k).unwrap();
            prop_assert_eq!(got.len(), oracle.len());
            for (g, o) in got.iter().zip(&oracle) {
                prop_assert_eq!(g.0, o.0);
            }
            for w in got.windows(2) {
                prop_assert!(w[0].1 >= w[1].1);
            }
        }

        #[test]
        fn record_json_round_trip(prompt in "[a-zA-Z ,'\"]{1,40}", score in 0.0f64..10.0, regen in 0u32..=2) {
            let mut r = sample_record(StoreId::Edit, &prompt);
            r.id = Some(3);
            r.evaluation_score = score;
            r.regeneration_count = regen;
            let text = serde_json::to_string(&r).unwrap();
            let back: TrajectoryRecord = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
