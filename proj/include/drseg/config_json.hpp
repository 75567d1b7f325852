#pragma once

#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "drseg/losses.hpp"
#include "drseg/network.hpp"
#include "drseg/synthdata.hpp"

namespace drseg {

// JSON (de)serialization for every config struct. Unknown keys are rejected
// so typos in config files fail loudly.

namespace detail {

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& section) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known |= (it.key() == k);
    if (!known)
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + section);
  }
}

}  // namespace detail

inline nlohmann::json to_json(const NetConfig& c) {
  return nlohmann::json{{"num_stages", c.num_stages},
                        {"full_channels", c.full_channels},
                        {"pooled_channels", c.pooled_channels},
                        {"pooled_scale", c.pooled_scale},
                        {"dilation_rates", c.dilation_rates},
                        {"attention_reduction", c.attention_reduction},
                        {"suppression_strength_init", c.suppression_strength_init},
                        {"boundary_gain_init", c.boundary_gain_init},
                        {"suppression_on", c.suppression_on},
                        {"boundary_on", c.boundary_on},
                        {"channel_attn_on", c.channel_attn_on},
                        {"spatial_attn_on", c.spatial_attn_on},
                        {"multiscale_on", c.multiscale_on},
                        {"up_mode", c.up_mode == UpMode::kTransposed ? "transposed" : "nearest_conv"}};
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"num_stages", "full_channels", "pooled_channels", "pooled_scale",
                      "dilation_rates", "attention_reduction", "suppression_strength_init",
                      "boundary_gain_init", "suppression_on", "boundary_on", "channel_attn_on",
                      "spatial_attn_on", "multiscale_on", "up_mode"},
                     "net");
  NetConfig c;
  detail::get_if(j, "num_stages", c.num_stages);
  detail::get_if(j, "full_channels", c.full_channels);
  detail::get_if(j, "pooled_channels", c.pooled_channels);
  detail::get_if(j, "pooled_scale", c.pooled_scale);
  detail::get_if(j, "dilation_rates", c.dilation_rates);
  detail::get_if(j, "attention_reduction", c.attention_reduction);
  detail::get_if(j, "suppression_strength_init", c.suppression_strength_init);
  detail::get_if(j, "boundary_gain_init", c.boundary_gain_init);
  detail::get_if(j, "suppression_on", c.suppression_on);
  detail::get_if(j, "boundary_on", c.boundary_on);
  detail::get_if(j, "channel_attn_on", c.channel_attn_on);
  detail::get_if(j, "spatial_attn_on", c.spatial_attn_on);
  detail::get_if(j, "multiscale_on", c.multiscale_on);
  if (j.contains("up_mode")) {
    const std::string m = j.at("up_mode").get<std::string>();
    if (m == "transposed")
      c.up_mode = UpMode::kTransposed;
    else if (m == "nearest_conv")
      c.up_mode = UpMode::kNearestConv;
    else
      throw std::invalid_argument("config: up_mode must be nearest_conv or transposed");
  }
  return c;
}

inline nlohmann::json to_json(const LossWeights& w) {
  return nlohmann::json{{"lambda_region", w.lambda_region},
                        {"lambda_boundary", w.lambda_boundary},
                        {"lambda_contrastive", w.lambda_contrastive},
                        {"tversky_alpha", w.tversky_alpha},
                        {"tversky_beta", w.tversky_beta},
                        {"temperature", w.temperature},
                        {"band_width", w.band_width},
                        {"smooth_eps", w.smooth_eps},
                        {"label_smoothing", w.label_smoothing},
                        {"boundary_signed_ramp", w.boundary_signed_ramp},
                        {"boundary_on_logits", w.boundary_on_logits}};
}

inline LossWeights loss_weights_from_json(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"lambda_region", "lambda_boundary", "lambda_contrastive", "tversky_alpha",
                      "tversky_beta", "temperature", "band_width", "smooth_eps",
                      "label_smoothing", "boundary_on_logits", "boundary_signed_ramp"},
                     "loss");
  LossWeights w;
  detail::get_if(j, "lambda_region", w.lambda_region);
  detail::get_if(j, "lambda_boundary", w.lambda_boundary);
  detail::get_if(j, "lambda_contrastive", w.lambda_contrastive);
  detail::get_if(j, "tversky_alpha", w.tversky_alpha);
  detail::get_if(j, "tversky_beta", w.tversky_beta);
  detail::get_if(j, "temperature", w.temperature);
  detail::get_if(j, "band_width", w.band_width);
  detail::get_if(j, "smooth_eps", w.smooth_eps);
  detail::get_if(j, "label_smoothing", w.label_smoothing);
  detail::get_if(j, "boundary_on_logits", w.boundary_on_logits);
  detail::get_if(j, "boundary_signed_ramp", w.boundary_signed_ramp);
  return w;
}

inline nlohmann::json to_json(const SynthConfig& c) {
  return nlohmann::json{{"image_size", c.image_size},
                        {"lesion_area_lo", c.lesion_area_lo},
                        {"lesion_area_hi", c.lesion_area_hi},
                        {"lesion_irregularity", c.lesion_irregularity},
                        {"contrast", c.contrast},
                        {"hair_count_lo", c.hair_count_lo},
                        {"hair_count_hi", c.hair_count_hi},
                        {"ruler_on", c.ruler_on},
                        {"specular_count_lo", c.specular_count_lo},
                        {"specular_count_hi", c.specular_count_hi},
                        {"skin_tone_mode", c.skin_tone_mode},
                        {"seed", c.seed}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"image_size", "lesion_area_lo", "lesion_area_hi", "lesion_irregularity",
                      "contrast", "hair_count_lo", "hair_count_hi", "ruler_on",
                      "specular_count_lo", "specular_count_hi", "skin_tone_mode", "seed"},
                     "synth");
  SynthConfig c;
  detail::get_if(j, "image_size", c.image_size);
  detail::get_if(j, "lesion_area_lo", c.lesion_area_lo);
  detail::get_if(j, "lesion_area_hi", c.lesion_area_hi);
  detail::get_if(j, "lesion_irregularity", c.lesion_irregularity);
  detail::get_if(j, "contrast", c.contrast);
  detail::get_if(j, "hair_count_lo", c.hair_count_lo);
  detail::get_if(j, "hair_count_hi", c.hair_count_hi);
  detail::get_if(j, "ruler_on", c.ruler_on);
  detail::get_if(j, "specular_count_lo", c.specular_count_lo);
  detail::get_if(j, "specular_count_hi", c.specular_count_hi);
  detail::get_if(j, "skin_tone_mode", c.skin_tone_mode);
  detail::get_if(j, "seed", c.seed);
  return c;
}

}  // namespace drseg
