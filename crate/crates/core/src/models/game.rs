use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Coalition, Game, ValueFunction};
use crate::segmentation::LabelMap;
use crate::tensor::ImageTensor;

use super::{fill_pixels, Classifier, MaskingPolicy};

/// What a coalition means for the image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoalitionSemantics {
    /// `v(S) = g_k(x) - g_k(x without S)`.
    #[default]
    Remove,
    /// `v(S) = g_k(only S kept) - g_k(nothing kept)`.
    KeepOnly,
}

/// Segments of one image as players of a logit game for class `k`.
pub struct ImageGame {
    model: Arc<dyn Classifier>,
    image: ImageTensor,
    segment_pixels: Vec<Vec<usize>>,
    class_k: usize,
    fill: [u8; 3],
    semantics: CoalitionSemantics,
    reference: f64,
}

impl ImageGame {
    pub fn new(
        model: Arc<dyn Classifier>,
        image: &ImageTensor,
        map: &LabelMap,
        class_k: usize,
        policy: MaskingPolicy,
        semantics: CoalitionSemantics,
    ) -> Result<Self> {
        if class_k >= model.class_count() {
            return Err(Error::domain(format!(
                "class {class_k} out of range for a {}-class model",
                model.class_count()
            )));
        }
        if (map.height(), map.width()) != (image.height(), image.width()) {
            return Err(Error::domain("label map and image dimensions differ"));
        }
        let fill = policy.fill_for(image);
        let segment_pixels = map.segment_pixels();
        let mut game = Self {
            model,
            image: image.clone(),
            segment_pixels,
            class_k,
            fill,
            semantics,
            reference: 0.0,
        };
        game.reference = match semantics {
            CoalitionSemantics::Remove => game.logit_without(&Coalition::empty())?,
            CoalitionSemantics::KeepOnly => {
                game.logit_without(&Coalition::full(game.segment_pixels.len()))?
            }
        };
        Ok(game)
    }

    fn logit_without(&self, removed: &Coalition) -> Result<f64> {
        let masked = fill_pixels(
            &self.image,
            removed
                .members()
                .flat_map(|s| self.segment_pixels[s].iter().copied()),
            self.fill,
        );
        Ok(self.model.predict(&masked)?.logits[self.class_k])
    }
}

impl ValueFunction for ImageGame {
    fn player_count(&self) -> usize {
        self.segment_pixels.len()
    }

    fn value(&self, coalition: &Coalition) -> Result<f64> {
        match self.semantics {
            CoalitionSemantics::Remove => Ok(self.reference - self.logit_without(coalition)?),
            CoalitionSemantics::KeepOnly => {
                let mut removed = Coalition::full(self.segment_pixels.len());
                for s in coalition.members() {
                    removed.remove(s);
                }
                Ok(self.logit_without(&removed)? - self.reference)
            }
        }
    }
}

/// Removal game over the segments of `map`: `v(S) = g_k(x) - g_k(mask(x, S))`.
pub fn build_game(
    model: Arc<dyn Classifier>,
    image: &ImageTensor,
    map: &LabelMap,
    class_k: usize,
    policy: MaskingPolicy,
) -> Result<Game> {
    build_game_with(model, image, map, class_k, policy, CoalitionSemantics::Remove)
}

pub fn build_game_with(
    model: Arc<dyn Classifier>,
    image: &ImageTensor,
    map: &LabelMap,
    class_k: usize,
    policy: MaskingPolicy,
    semantics: CoalitionSemantics,
) -> Result<Game> {
    Ok(Game::new(ImageGame::new(model, image, map, class_k, policy, semantics)?))
}
