use serde::{Deserialize, Serialize};

/// Dense district × time storage, district-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid<T> {
    districts: usize,
    steps: usize,
    data: Vec<T>,
}

impl<T: Clone + Default> Grid<T> {
    pub fn new(districts: usize, steps: usize) -> Self {
        Self {
            districts,
            steps,
            data: vec![T::default(); districts * steps],
        }
    }
}

impl<T> Grid<T> {
    /// Wrap district-major data.
    pub fn from_vec(districts: usize, steps: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), districts * steps, "grid size mismatch");
        Self { districts, steps, data }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let districts = rows.len();
        let steps = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == steps), "ragged grid rows");
        Self {
            districts,
            steps,
            data: rows.into_iter().flatten().collect(),
        }
    }

    #[inline]
    pub fn districts(&self) -> usize {
        self.districts
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn get(&self, district: usize, step: usize) -> &T {
        &self.data[district * self.steps + step]
    }

    #[inline]
    pub fn get_mut(&mut self, district: usize, step: usize) -> &mut T {
        &mut self.data[district * self.steps + step]
    }

    #[inline]
    pub fn row(&self, district: usize) -> &[T] {
        &self.data[district * self.steps..(district + 1) * self.steps]
    }

    #[inline]
    pub fn row_mut(&mut self, district: usize) -> &mut [T] {
        &mut self.data[district * self.steps..(district + 1) * self.steps]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on a zero chunk size
        let step = self.steps.max(1);
        self.data.chunks_exact(step).take(self.districts)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            districts: self.districts,
            steps: self.steps,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Copy> Grid<T> {
    #[inline]
    pub fn at(&self, district: usize, step: usize) -> T {
        self.data[district * self.steps + step]
    }

    #[inline]
    pub fn set(&mut self, district: usize, step: usize, value: T) {
        self.data[district * self.steps + step] = value;
    }
}
