//! Browser bindings. Every call returns a flat `Float64Array`; errors are
//! thrown as JavaScript strings.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js<T>(r: pathlangevin::Result<T>) -> Result<T, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn bridge_paths(intervals: usize, start: f64, end: f64, barrier: f64, steps: u32, paths: u32, seed: u32) -> Result<Vec<f64>, JsValue> {
    js(demo::bridge_paths(intervals, start, end, barrier, steps.into(), paths.into(), seed.into()))
}

#[wasm_bindgen]
pub fn midpoint_histogram(intervals: usize, start: f64, end: f64, barrier: f64, steps: u32, bins: usize, seed: u32) -> Result<Vec<f64>, JsValue> {
    js(demo::midpoint_histogram(intervals, start, end, barrier, steps.into(), bins, seed.into()))
}

#[wasm_bindgen]
pub fn smoothing_posterior(intervals: usize, noise: f64, steps: u32, seed: u32) -> Result<Vec<f64>, JsValue> {
    js(demo::smoothing_posterior(intervals, noise, steps.into(), seed.into()))
}

#[wasm_bindgen]
pub fn histogram_range() -> Vec<f64> {
    vec![demo::HIST_RANGE.0, demo::HIST_RANGE.1]
}
