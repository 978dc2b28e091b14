//! Positional information: fixed sinusoidal encodings and a learned table.

use crate::error::{Error, Result};
use crate::param::{Fwd, Init, ParamBuilder, ParamId};
use crate::tensor::{Tensor, Var};

/// Sinusoidal positions `[T, d]`: channel pairs (sin, cos) of
/// `pos / 10000^(2i/d)`, interleaved.
pub fn sinusoidal_positions(t_len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; t_len * dim];
    for pos in 0..t_len {
        for i in 0..dim.div_ceil(2) {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data[pos * dim + 2 * i] = angle.sin();
            if 2 * i + 1 < dim {
                data[pos * dim + 2 * i + 1] = angle.cos();
            }
        }
    }
    Tensor { shape: vec![t_len, dim], data }
}

/// Learned position embeddings backed by a `[max_len, d]` table.
#[derive(Debug)]
pub struct LearnedPositions {
    table: ParamId,
    pub max_len: usize,
}

impl LearnedPositions {
    pub fn build(b: &mut ParamBuilder, name: &str, max_len: usize, dim: usize) -> LearnedPositions {
        LearnedPositions {
            table: b.param(name, &[max_len, dim], Init::Uniform(0.04)),
            max_len,
        }
    }

    /// Rows `start..start + len` of the table.
    pub fn lookup(&self, fwd: &mut Fwd, start: usize, len: usize) -> Result<Var> {
        if start + len > self.max_len {
            return Err(Error::PositionOutOfRange { pos: start + len - 1, size: self.max_len });
        }
        let ids: Vec<usize> = (start..start + len).collect();
        let table = fwd.p(self.table);
        fwd.tape.gather(table, &ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{ParamStore, StoreMode};
    use crate::tensor::Tape;

    #[test]
    fn position_zero_alternates_zero_one() {
        let pe = sinusoidal_positions(3, 6);
        assert_eq!(&pe.data[0..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn values_stay_in_unit_range() {
        let pe = sinusoidal_positions(50, 16);
        assert!(pe.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn learned_lookup_returns_table_rows() {
        let mut store = ParamStore::new(StoreMode::Alloc);
        let mut b = ParamBuilder::new(&mut store, 3);
        let pos = LearnedPositions::build(&mut b, "pos", 4, 2);
        let id = store.find("pos").unwrap();
        store
            .set_value(
                id,
                Tensor::matrix(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0], vec![6.0, 7.0]])
                    .unwrap(),
            )
            .unwrap();
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let row = pos.lookup(&mut fwd, 2, 1).unwrap();
        assert_eq!(fwd.tape.value(row).data, vec![4.0, 5.0]);

        assert!(matches!(
            pos.lookup(&mut fwd, 3, 2),
            Err(Error::PositionOutOfRange { .. })
        ));
    }
}
