use alloc::vec::Vec;

/// `{0.10, 0.15, …, 0.90}`: 17 points at 0.05 spacing.
pub fn default_grid() -> Vec<f64> {
    (0..17).map(|k| f64::from(10 + 5 * k) / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch {
    pub best_value: f64,
    pub best_score: f64,
    /// `(value, score)` in grid order.
    pub table: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SearchError<E> {
    #[error("empty search grid")]
    EmptyGrid,
    #[error("objective failed at {value}: {source}")]
    Objective { value: f64, source: E },
}

/// Scores every grid point and returns the argmax; equal scores prefer the
/// smaller value.
pub fn grid_search<E, F>(grid: &[f64], mut objective: F) -> Result<GridSearch, SearchError<E>>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    if grid.is_empty() {
        return Err(SearchError::EmptyGrid);
    }
    let mut table = Vec::with_capacity(grid.len());
    for &value in grid {
        let score = objective(value).map_err(|source| SearchError::Objective { value, source })?;
        table.push((value, score));
    }
    let (best_value, best_score) = table.iter().copied().fold(table[0], |best, cur| {
        if cur.1 > best.1 || (cur.1 == best.1 && cur.0 < best.0) {
            cur
        } else {
            best
        }
    });
    Ok(GridSearch {
        best_value,
        best_score,
        table,
    })
}
