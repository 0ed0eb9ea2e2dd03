//! On-disk MMKG format: UTF-8, tab-separated, LF line endings.
//!
//! A KG directory holds `entities.tsv`, `rel_triples.tsv`, `attr.tsv` and
//! optionally `visual.tsv` / `surface.tsv`. A pair directory holds `kg1/`,
//! `kg2/` and `alignments.tsv`. CRLF input is normalized to LF on read.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{MmeaError, Result};
use crate::kg::{Entity, Mmkg, Modality, ModalityFeatureTable};

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let raw = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            MmeaError::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            MmeaError::io(format!("reading {}", path.display()), e)
        }
    })?;
    let normalized = raw.replace("\r\n", "\n");
    Ok(normalized
        .split('\n')
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

fn malformed(path: &Path, line: usize, msg: impl Into<String>) -> MmeaError {
    MmeaError::Malformed {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_id(path: &Path, line: usize, field: &str) -> Result<i64> {
    field
        .parse::<i64>()
        .map_err(|_| malformed(path, line, format!("'{field}' is not an integer id")))
}

fn parse_float(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| malformed(path, line, format!("'{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(malformed(path, line, format!("non-finite value '{field}'")));
    }
    Ok(v)
}

fn load_feature_table(
    path: &Path,
    modality: Modality,
    index: &HashMap<i64, usize>,
    entities: usize,
) -> Result<Option<ModalityFeatureTable>> {
    if !path.exists() {
        return Ok(None);
    }
    let lines = read_lines(path)?;
    let mut table: Option<ModalityFeatureTable> = None;
    for (lineno, line) in lines.iter().enumerate() {
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(malformed(path, lineno, "expected an id and at least one value"));
        }
        let id = parse_id(path, lineno, fields[0])?;
        let entity = *index.get(&id).ok_or_else(|| MmeaError::DanglingRef {
            path: path.to_path_buf(),
            line: lineno,
            kind: "entity",
            name: id.to_string(),
        })?;
        let vector: Vec<f64> = fields[1..]
            .iter()
            .map(|f| parse_float(path, lineno, f))
            .collect::<Result<_>>()?;
        let table = table.get_or_insert_with(|| {
            ModalityFeatureTable::empty(modality, vector.len(), entities)
        });
        if vector.len() != table.dim {
            return Err(malformed(
                path,
                lineno,
                format!("vector length {} differs from {}", vector.len(), table.dim),
            ));
        }
        if table.available[entity] {
            return Err(malformed(path, lineno, format!("duplicate vector for entity {id}")));
        }
        table.set(entity, vector)?;
    }
    Ok(table)
}

/// Loads and fully validates one KG directory.
pub fn load_mmkg(dir: &Path) -> Result<Mmkg> {
    let entities_path = dir.join("entities.tsv");
    let lines = read_lines(&entities_path)?;
    let mut entities = Vec::with_capacity(lines.len());
    let mut index: HashMap<i64, usize> = HashMap::new();
    for (lineno, line) in lines.iter().enumerate() {
        let lineno = lineno + 1;
        let (id_field, name) = line
            .split_once('\t')
            .ok_or_else(|| malformed(&entities_path, lineno, "expected 'id<TAB>name'"))?;
        let id = parse_id(&entities_path, lineno, id_field)?;
        if index.insert(id, entities.len()).is_some() {
            return Err(malformed(&entities_path, lineno, format!("duplicate entity id {id}")));
        }
        entities.push(Entity {
            id,
            name: name.to_string(),
        });
    }

    let triples_path = dir.join("rel_triples.tsv");
    let lines = read_lines(&triples_path)?;
    let mut relations: Vec<String> = Vec::new();
    let mut rel_index: HashMap<String, usize> = HashMap::new();
    let mut rel_triples = Vec::with_capacity(lines.len());
    let mut seen = HashSet::new();
    for (lineno, line) in lines.iter().enumerate() {
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(&triples_path, lineno, "expected 'head<TAB>relation<TAB>tail'"));
        }
        let resolve = |field: &str| -> Result<usize> {
            let id = parse_id(&triples_path, lineno, field)?;
            index.get(&id).copied().ok_or_else(|| MmeaError::DanglingRef {
                path: triples_path.clone(),
                line: lineno,
                kind: "entity",
                name: id.to_string(),
            })
        };
        let head = resolve(fields[0])?;
        let tail = resolve(fields[2])?;
        let rel = *rel_index.entry(fields[1].to_string()).or_insert_with(|| {
            relations.push(fields[1].to_string());
            relations.len() - 1
        });
        if !seen.insert((head, rel, tail)) {
            return Err(malformed(&triples_path, lineno, "exact duplicate triple"));
        }
        rel_triples.push((head, rel, tail));
    }

    let attr_path = dir.join("attr.tsv");
    let lines = read_lines(&attr_path)?;
    let mut attributes: Vec<String> = Vec::new();
    let mut attr_index: HashMap<String, usize> = HashMap::new();
    let mut attr_assignments = Vec::with_capacity(lines.len());
    for (lineno, line) in lines.iter().enumerate() {
        let lineno = lineno + 1;
        let (id_field, label) = line
            .split_once('\t')
            .ok_or_else(|| malformed(&attr_path, lineno, "expected 'entity<TAB>attribute'"))?;
        let id = parse_id(&attr_path, lineno, id_field)?;
        let entity = *index.get(&id).ok_or_else(|| MmeaError::DanglingRef {
            path: attr_path.clone(),
            line: lineno,
            kind: "entity",
            name: id.to_string(),
        })?;
        let attr = *attr_index.entry(label.to_string()).or_insert_with(|| {
            attributes.push(label.to_string());
            attributes.len() - 1
        });
        attr_assignments.push((entity, attr));
    }

    let visual = load_feature_table(&dir.join("visual.tsv"), Modality::Visual, &index, entities.len())?;
    let surface = load_feature_table(&dir.join("surface.tsv"), Modality::Surface, &index, entities.len())?;

    Ok(Mmkg {
        entities,
        relations,
        attributes,
        rel_triples,
        attr_assignments,
        visual,
        surface,
    })
}

fn write_feature_table(path: &Path, kg: &Mmkg, table: &ModalityFeatureTable) -> Result<()> {
    let mut out = String::new();
    for (i, entity) in kg.entities.iter().enumerate() {
        if !table.available[i] {
            continue;
        }
        out.push_str(&entity.id.to_string());
        for v in &table.vectors[i] {
            out.push('\t');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| MmeaError::io(format!("writing {}", path.display()), e))
}

/// Writes one KG directory in the loader's format. `load_mmkg(write(kg))`
/// reproduces the value exactly (floats use shortest round-trip decimals).
pub fn write_mmkg(dir: &Path, kg: &Mmkg) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MmeaError::io(format!("creating {}", dir.display()), e))?;

    let mut out = String::new();
    for e in &kg.entities {
        out.push_str(&format!("{}\t{}\n", e.id, e.name));
    }
    fs::write(dir.join("entities.tsv"), out)
        .map_err(|e| MmeaError::io("writing entities.tsv", e))?;

    let mut out = String::new();
    for &(h, r, t) in &kg.rel_triples {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            kg.entities[h].id, kg.relations[r], kg.entities[t].id
        ));
    }
    fs::write(dir.join("rel_triples.tsv"), out)
        .map_err(|e| MmeaError::io("writing rel_triples.tsv", e))?;

    let mut out = String::new();
    for &(e, a) in &kg.attr_assignments {
        out.push_str(&format!("{}\t{}\n", kg.entities[e].id, kg.attributes[a]));
    }
    fs::write(dir.join("attr.tsv"), out).map_err(|e| MmeaError::io("writing attr.tsv", e))?;

    if let Some(table) = &kg.visual {
        write_feature_table(&dir.join("visual.tsv"), kg, table)?;
    }
    if let Some(table) = &kg.surface {
        write_feature_table(&dir.join("surface.tsv"), kg, table)?;
    }
    Ok(())
}

/// Loads a pair directory: `kg1/`, `kg2/` and `alignments.tsv` with pairs of
/// raw ids resolved to dense indices.
#[allow(clippy::type_complexity)]
pub fn load_pair(dir: &Path) -> Result<(Mmkg, Mmkg, Vec<(usize, usize)>)> {
    let kg1 = load_mmkg(&dir.join("kg1"))?;
    let kg2 = load_mmkg(&dir.join("kg2"))?;
    let path = dir.join("alignments.tsv");
    let lines = read_lines(&path)?;
    let idx1 = kg1.entity_index();
    let idx2 = kg2.entity_index();
    let mut pairs = Vec::with_capacity(lines.len());
    for (lineno, line) in lines.iter().enumerate() {
        let lineno = lineno + 1;
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| malformed(&path, lineno, "expected 'id1<TAB>id2'"))?;
        let a = parse_id(&path, lineno, a)?;
        let b = parse_id(&path, lineno, b)?;
        let left = *idx1.get(&a).ok_or_else(|| MmeaError::DanglingRef {
            path: path.clone(),
            line: lineno,
            kind: "entity in kg1",
            name: a.to_string(),
        })?;
        let right = *idx2.get(&b).ok_or_else(|| MmeaError::DanglingRef {
            path: path.clone(),
            line: lineno,
            kind: "entity in kg2",
            name: b.to_string(),
        })?;
        pairs.push((left, right));
    }
    Ok((kg1, kg2, pairs))
}

/// Writes a pair directory (see [`load_pair`]).
pub fn write_pair(dir: &Path, kg1: &Mmkg, kg2: &Mmkg, pairs: &[(usize, usize)]) -> Result<()> {
    write_mmkg(&dir.join("kg1"), kg1)?;
    write_mmkg(&dir.join("kg2"), kg2)?;
    let mut out = String::new();
    for &(a, b) in pairs {
        out.push_str(&format!("{}\t{}\n", kg1.entities[a].id, kg2.entities[b].id));
    }
    fs::write(dir.join("alignments.tsv"), out)
        .map_err(|e| MmeaError::io("writing alignments.tsv", e))?;
    Ok(())
}
