//! Offline descriptor bank: hand-written weather/lighting fragments per
//! (weather, time) cell, selected by `derived_seed % len`. Makes the whole
//! prompt chain a pure function of the plan, so end-to-end runs are
//! reproducible without any network.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PromptError;

/// Descriptor fragments keyed by weather, then time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DescriptorBank {
    pub cells: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

impl DescriptorBank {
    pub fn from_json_file(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|e| PromptError::Validation {
            what: "descriptor bank".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        let bank: DescriptorBank = serde_json::from_str(&text).map_err(|e| PromptError::Validation {
            what: "descriptor bank".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for (weather, times) in &self.cells {
            for (time, fragments) in times {
                if fragments.is_empty() {
                    return Err(PromptError::Validation {
                        what: "descriptor bank".into(),
                        message: format!("cell ({weather}, {time}) has no descriptors"),
                    });
                }
                if fragments.iter().any(|f| f.trim().is_empty()) {
                    return Err(PromptError::Validation {
                        what: "descriptor bank".into(),
                        message: format!("cell ({weather}, {time}) contains an empty descriptor"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Deterministic fragment for a cell: `seed % len` into its list. Cells
    /// absent from the bank fall back to generic fragments templated from
    /// the weather and time words themselves.
    pub fn pick(&self, weather: &str, time: &str, seed: u64) -> String {
        if let Some(fragments) = self.cells.get(weather).and_then(|times| times.get(time)) {
            return fragments[(seed % fragments.len() as u64) as usize].clone();
        }
        let generic = generic_fragments(weather, time);
        generic[(seed % generic.len() as u64) as usize].clone()
    }

    /// The built-in bank: five fragments for every default grid cell.
    pub fn builtin() -> Self {
        let mut cells: BTreeMap<String, BTreeMap<String, Vec<String>>> = BTreeMap::new();
        let mut put = |weather: &str, time: &str, fragments: [&str; 5]| {
            cells
                .entry(weather.to_string())
                .or_default()
                .insert(time.to_string(), fragments.iter().map(|s| s.to_string()).collect());
        };

        put("snowy", "daytime", [
            "thick snow blanketing the road and parked cars under a pale white sky, tire tracks pressed into the slush",
            "heavy snowflakes drifting across the street in flat daylight, rooftops and hedges capped in white",
            "a snow-covered avenue with grey slush along the curb, weak winter sun behind low clouds",
            "fresh powder dusting the asphalt while plowed snowbanks line the roadside, diffuse midday light",
            "icy pavement gleaming faintly under an overcast winter sky, snow weighing down the roadside trees",
        ]);
        put("snowy", "nighttime", [
            "snow falling through the cones of orange streetlamps, the road surface muffled in white",
            "a dark street at night with headlights catching swirling snowflakes, snowbanks glowing under sodium lights",
            "moonless winter night, fresh snow reflecting the cold glare of shop signs and traffic signals",
            "packed snow glittering under streetlights, long blue shadows stretching across the empty lanes",
            "a night blizzard dimming the streetlights to halos, windshields and hoods collecting snow",
        ]);
        put("rainy", "daytime", [
            "beneath a slate-grey overcast sky, steady rain streaking down and pooling along the gutters",
            "wet asphalt mirroring the dull daylight, raindrops rippling through puddles between lane markings",
            "a drizzle-soaked street at midday, spray rising from tires and mist softening the buildings",
            "rain-darkened pavement with scattered umbrellas on the sidewalk, low clouds pressing over the rooftops",
            "sheets of rain sweeping the roadway in pale daylight, crosswalk paint glistening with runoff",
        ]);
        put("rainy", "nighttime", [
            "night rain smearing the glow of traffic signals across the soaked asphalt",
            "streetlights and neon signs reflected in long streaks on the wet road, rain hissing down",
            "a downpour after dark, wipers mid-sweep and brake lights blooming red in the puddles",
            "rain-slicked lanes shining under sparse lamps, drops flaring in the headlight beams",
            "a wet midnight street, reflections doubling every light source, gutters running full",
        ]);
        put("foggy", "daytime", [
            "dense morning fog swallowing the far end of the street, buildings fading to grey silhouettes",
            "a milky haze over the road in weak daylight, traffic signals reduced to soft smudges of color",
            "low fog drifting across the lanes, guardrails and trees dissolving within a hundred meters",
            "pale diffuse light through thick mist, the lane markings vanishing into a white wall",
            "fog hanging over damp tarmac at noon, oncoming headlights emerging as dim halos",
        ]);
        put("foggy", "nighttime", [
            "thick night fog glowing around the streetlamps, visibility closing to a few car lengths",
            "fog rolling through a dark intersection, signal lights bleeding soft halos into the mist",
            "a murky nighttime haze, headlight beams cut short and reflections smeared on the damp road",
            "streetlights buried in fog, the roadway dissolving into grey darkness beyond the crosswalk",
            "cold fog after midnight, every light source wrapped in a pale corona over the wet asphalt",
        ]);

        DescriptorBank { cells }
    }
}

fn generic_fragments(weather: &str, time: &str) -> [String; 5] {
    [
        format!("{weather} conditions at {time}, the road surface and signage rendered in fine detail"),
        format!("a driving scene during {time} marked by {weather} weather, atmospheric light over the asphalt"),
        format!("{weather} skies shaping the light at {time}, reflections and textures across the roadway"),
        format!("the street at {time} under {weather} conditions, vehicles and surroundings sharply visible"),
        format!("an urban road in {weather} weather at {time}, realistic lighting and depth"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_covers_default_grid_with_five_each() {
        let bank = DescriptorBank::builtin();
        bank.validate().unwrap();
        let mut total = 0;
        for weather in ["snowy", "rainy", "foggy"] {
            for time in ["daytime", "nighttime"] {
                let fragments = &bank.cells[weather][time];
                assert!(fragments.len() >= 5, "({weather},{time}) has {}", fragments.len());
                total += fragments.len();
            }
        }
        assert!(total >= 30);
    }

    #[test]
    fn pick_is_seed_modulo_length() {
        let bank = DescriptorBank::builtin();
        let fragments = &bank.cells["rainy"]["daytime"];
        for seed in 0..12u64 {
            let expected = &fragments[(seed % fragments.len() as u64) as usize];
            assert_eq!(&bank.pick("rainy", "daytime", seed), expected);
        }
    }

    #[test]
    fn unknown_cell_falls_back_to_generic() {
        let bank = DescriptorBank::builtin();
        let text = bank.pick("hail", "dusk", 3);
        assert!(text.contains("hail"));
        assert!(text.contains("dusk"));
        assert_eq!(text, bank.pick("hail", "dusk", 3));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        let bank = DescriptorBank::builtin();
        std::fs::write(&path, serde_json::to_string_pretty(&bank).unwrap()).unwrap();
        let loaded = DescriptorBank::from_json_file(&path).unwrap();
        assert_eq!(bank, loaded);

        std::fs::write(&path, r#"{"cells": {"rainy": {"daytime": []}}}"#).unwrap();
        assert!(DescriptorBank::from_json_file(&path).is_err());
    }
}
