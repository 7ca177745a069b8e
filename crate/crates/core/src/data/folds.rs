use serde::{Deserialize, Serialize};

use super::manifest::GarmentManifest;
use super::ShapeClass;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_garment_ids: Vec<String>,
    pub test_garment_ids: Vec<String>,
}

/// Fold k holds out the k-th garment (manifest order) of every class. There
/// are as many folds as garments per class.
pub fn leave_one_out_folds(manifest: &GarmentManifest) -> Result<Vec<FoldSplit>> {
    let groups = manifest.by_class();
    for class in ShapeClass::ALL {
        if !groups.contains_key(&class) {
            return Err(Error::Data(format!("no garments of class '{}'", class.name())));
        }
    }
    let per_class = groups[&ShapeClass::ALL[0]].len();
    if let Some((class, g)) = groups.iter().find(|(_, g)| g.len() != per_class) {
        return Err(Error::Data(format!(
            "unequal garments per class: '{}' has {}, expected {per_class}",
            class.name(),
            g.len()
        )));
    }
    Ok((0..per_class)
        .map(|k| {
            let mut split = FoldSplit {
                fold_index: k,
                train_garment_ids: Vec::new(),
                test_garment_ids: Vec::new(),
            };
            for garments in groups.values() {
                for (i, g) in garments.iter().enumerate() {
                    if i == k {
                        split.test_garment_ids.push(g.id.clone());
                    } else {
                        split.train_garment_ids.push(g.id.clone());
                    }
                }
            }
            split
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GarmentEntry, MANIFEST_FORMAT};
    use std::collections::HashSet;

    fn manifest(per_class: usize) -> GarmentManifest {
        let garments = ShapeClass::ALL
            .iter()
            .flat_map(|&c| {
                (0..per_class).map(move |i| GarmentEntry {
                    id: format!("{}-{}", c.name(), i + 1),
                    shape_class: c,
                    mass_grams: 100.0 + 100.0 * i as f64,
                    sequences: vec![],
                })
            })
            .collect();
        GarmentManifest {
            format: MANIFEST_FORMAT.into(),
            depth_max_range_m: 2.0,
            garments,
            root: Default::default(),
        }
    }

    #[test]
    fn full_layout_has_four_folds() {
        let m = manifest(4);
        let folds = leave_one_out_folds(&m).unwrap();
        assert_eq!(folds.len(), 4);
        let mut tested = HashSet::new();
        for f in &folds {
            assert_eq!(f.train_garment_ids.len(), 15);
            assert_eq!(f.test_garment_ids.len(), 5);
            let train: HashSet<_> = f.train_garment_ids.iter().collect();
            assert!(f.test_garment_ids.iter().all(|id| !train.contains(id)));
            tested.extend(f.test_garment_ids.iter().cloned());
        }
        assert_eq!(tested.len(), 20);
        assert!(folds[1].test_garment_ids.contains(&"shirt-2".to_string()));
    }

    #[test]
    fn toy_layout_and_bad_layouts() {
        let folds = leave_one_out_folds(&manifest(2)).unwrap();
        assert_eq!(folds.len(), 2);
        assert!(folds.iter().all(|f| f.train_garment_ids.len() == 5 && f.test_garment_ids.len() == 5));

        let mut m = manifest(2);
        m.garments.pop();
        assert!(leave_one_out_folds(&m).is_err());
        let mut m = manifest(2);
        m.garments.retain(|g| g.shape_class != ShapeClass::Towel);
        assert!(leave_one_out_folds(&m).is_err());
    }
}
