//! The four-column data table: one row per value symbol or enum value, with
//! argument index, type index and position within the argument.

use ndarray::{s, Array2, Array3};
use rand::Rng;
use thiserror::Error;

use crate::numeric::Real;
use crate::schema::{Schema, StructuredExample, Violation, DOMAIN_ARG, INTENT_ARG};
use crate::tokenizer::{Vocab, EOL};

pub const DEFAULT_MAX_ROWS: usize = 400;

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("example does not validate: {0:?}")]
    Invalid(Vec<Violation>),
    #[error("{rows} rows exceed the table capacity of {max_rows}")]
    Overflow { rows: usize, max_rows: usize },
    #[error("{column} index {index} out of bounds for table of {size}")]
    OutOfBounds { column: &'static str, index: usize, size: usize },
    #[error("enum value `{0}` missing from the schema enum table")]
    UnknownEnum(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Piece(u32),
    Enum(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DataRow {
    pub symbol: Symbol,
    pub arg: u32,
    pub ty: u32,
    pub pos: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DataTable {
    pub rows: Vec<DataRow>,
    pub max_rows: usize,
}

impl DataTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Validity flag for each of the `max_rows` slots.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.max_rows).map(|i| i < self.rows.len()).collect()
    }

    /// Source text as a single argument (index 0, type 0), for text-to-text use.
    pub fn from_text(vocab: &Vocab, text: &str, max_rows: usize) -> Result<DataTable, EncodeError> {
        let mut rows = Vec::new();
        push_string(&mut rows, vocab.encode(text), 0, 0);
        check_capacity(rows, max_rows)
    }

    /// TSV of the four columns plus the piece or enum value each row stands for.
    pub fn debug_tsv(&self, vocab: &Vocab, schema: &Schema) -> String {
        let mut out = String::from("symbol\targ\ttype\tpos\tpiece\n");
        for r in &self.rows {
            let (col1, label) = match r.symbol {
                Symbol::Piece(id) => (id as usize, vocab.piece_label(id)),
                Symbol::Enum(e) => (
                    vocab.len() + e as usize,
                    schema.enum_table().get(e as usize).cloned().unwrap_or_default(),
                ),
            };
            out.push_str(&format!("{col1}\t{}\t{}\t{}\t{label}\n", r.arg, r.ty, r.pos));
        }
        out
    }
}

fn push_string(rows: &mut Vec<DataRow>, pieces: Vec<u32>, arg: u32, ty: u32) {
    let k = pieces.len() as u32;
    for (pos, id) in pieces.into_iter().enumerate() {
        rows.push(DataRow { symbol: Symbol::Piece(id), arg, ty, pos: pos as u32 });
    }
    rows.push(DataRow { symbol: Symbol::Piece(EOL), arg, ty, pos: k });
}

fn check_capacity(rows: Vec<DataRow>, max_rows: usize) -> Result<DataTable, EncodeError> {
    if rows.len() > max_rows {
        return Err(EncodeError::Overflow { rows: rows.len(), max_rows });
    }
    Ok(DataTable { rows, max_rows })
}

/// Rows in schema argument-index order, so the table does not depend on the
/// order of the example's value map. Argument names get no rows.
pub fn encode_table(
    example: &StructuredExample,
    schema: &Schema,
    vocab: &Vocab,
    max_rows: usize,
) -> Result<DataTable, EncodeError> {
    schema.validate(example).map_err(EncodeError::Invalid)?;
    let mut args: Vec<_> = schema.args().iter().collect();
    args.sort_by_key(|a| a.arg_index);
    let mut rows = Vec::new();
    for a in args {
        let value = match a.name.as_str() {
            DOMAIN_ARG => Some(example.intent.domain.as_str()),
            INTENT_ARG => Some(example.intent.intent.as_str()),
            name => example.values.get(name).map(String::as_str),
        };
        let Some(value) = value else { continue };
        let (arg, ty) = (a.arg_index as u32, a.type_index as u32);
        if a.is_enum() {
            let e = schema.enum_index(value).ok_or_else(|| EncodeError::UnknownEnum(value.to_string()))?;
            rows.push(DataRow { symbol: Symbol::Enum(e as u32), arg, ty, pos: 0 });
        } else {
            push_string(&mut rows, vocab.encode(value), arg, ty);
        }
    }
    check_capacity(rows, max_rows)
}

/// Sizes of the four embedding tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TableDims {
    pub vocab: usize,
    pub enums: usize,
    pub args: usize,
    pub types: usize,
    pub positions: usize,
}

impl TableDims {
    pub fn for_schema(schema: &Schema, vocab: &Vocab, max_rows: usize) -> TableDims {
        TableDims {
            vocab: vocab.len(),
            enums: schema.enum_table().len(),
            args: schema.arg_slots(),
            types: schema.type_count(),
            positions: max_rows,
        }
    }

    /// Single-argument layout for text tables.
    pub fn for_text(vocab: &Vocab, max_rows: usize) -> TableDims {
        TableDims { vocab: vocab.len(), enums: 0, args: 1, types: 1, positions: max_rows }
    }

    pub fn symbols(&self) -> usize {
        self.vocab + self.enums
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub dims: TableDims,
    /// `[vocab + enums, E]`; enum `e` lives at row `vocab + e`.
    pub symbol: Array2<F>,
    pub arg: Array2<F>,
    pub ty: Array2<F>,
    pub pos: Array2<F>,
    /// `[4E, W_k]`
    pub wk: Array2<F>,
    /// `[4E, W_v]`
    pub wv: Array2<F>,
}

pub(crate) fn fill_uniform<F: Real, R: Rng + ?Sized>(t: &mut Array2<F>, limit: f64, rng: &mut R) {
    t.mapv_inplace(|_| F::of(rng.gen_range(-limit..=limit)));
}

impl<F: Real> EncoderParams<F> {
    pub fn zeros(dims: TableDims, e: usize, wk: usize, wv: usize) -> Self {
        EncoderParams {
            dims,
            symbol: Array2::zeros((dims.symbols(), e)),
            arg: Array2::zeros((dims.args, e)),
            ty: Array2::zeros((dims.types, e)),
            pos: Array2::zeros((dims.positions, e)),
            wk: Array2::zeros((4 * e, wk)),
            wv: Array2::zeros((4 * e, wv)),
        }
    }

    pub fn random<R: Rng + ?Sized>(dims: TableDims, e: usize, wk: usize, wv: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(dims, e, wk, wv);
        for t in [&mut p.symbol, &mut p.arg, &mut p.ty, &mut p.pos] {
            fill_uniform(t, 0.1, rng);
        }
        let limit = (3.0 / (4 * e) as f64).sqrt();
        fill_uniform(&mut p.wk, limit, rng);
        fill_uniform(&mut p.wv, limit, rng);
        p
    }

    pub fn width(&self) -> usize {
        self.symbol.ncols()
    }

    /// Embedding-table row for each column of each table row.
    pub fn indices(&self, table: &DataTable) -> Result<Vec<[usize; 4]>, EncodeError> {
        table
            .rows
            .iter()
            .map(|r| {
                let col1 = match r.symbol {
                    Symbol::Piece(id) => id as usize,
                    Symbol::Enum(e) => self.dims.vocab + e as usize,
                };
                let idx = [col1, r.arg as usize, r.ty as usize, r.pos as usize];
                let tables = [("symbol", &self.symbol), ("arg", &self.arg), ("type", &self.ty), ("position", &self.pos)];
                for ((column, t), &i) in tables.into_iter().zip(&idx) {
                    if i >= t.nrows() {
                        return Err(EncodeError::OutOfBounds { column, index: i, size: t.nrows() });
                    }
                }
                Ok(idx)
            })
            .collect()
    }

    /// `[rows, 4E]`: the four embeddings of each row side by side.
    pub fn gather(&self, indices: &[[usize; 4]]) -> Array2<F> {
        let e = self.width();
        let mut x = Array2::zeros((indices.len(), 4 * e));
        for (r, idx) in indices.iter().enumerate() {
            for (c, t) in [&self.symbol, &self.arg, &self.ty, &self.pos].into_iter().enumerate() {
                x.slice_mut(s![r, c * e..(c + 1) * e]).assign(&t.row(idx[c]));
            }
        }
        x
    }
}

/// Keys `[B, max_rows, W_k]`, values `[B, max_rows, W_v]` and the row mask.
/// Masked rows are left at zero.
pub fn project<F: Real>(
    tables: &[&DataTable],
    params: &EncoderParams<F>,
) -> Result<(Array3<F>, Array3<F>, Array2<bool>), EncodeError> {
    let max_rows = tables.iter().map(|t| t.max_rows).max().unwrap_or(0);
    let (b, wk, wv) = (tables.len(), params.wk.ncols(), params.wv.ncols());
    let mut keys = Array3::zeros((b, max_rows, wk));
    let mut values = Array3::zeros((b, max_rows, wv));
    let mut mask = Array2::from_elem((b, max_rows), false);
    for (i, t) in tables.iter().enumerate() {
        let x = params.gather(&params.indices(t)?);
        let n = t.len();
        keys.slice_mut(s![i, ..n, ..]).assign(&x.dot(&params.wk));
        values.slice_mut(s![i, ..n, ..]).assign(&x.dot(&params.wv));
        mask.slice_mut(s![i, ..n]).fill(true);
    }
    Ok((keys, values, mask))
}
