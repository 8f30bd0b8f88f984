#pragma once

// Private JSON glue. The vendored single-header nlohmann json stays out of
// the installed public headers; config structs expose text-based entry
// points and these ADL converters do the real work inside the library.

#include <json.hpp>

#include "mitodet/augment.hpp"
#include "mitodet/model.hpp"
#include "mitodet/train.hpp"

namespace mitodet {

using json = nlohmann::json;

void to_json(json& j, const StageConfig& s);
void from_json(const json& j, StageConfig& s);
void to_json(json& j, const ModelConfig& c);
void from_json(const json& j, ModelConfig& c);
void to_json(json& j, const TransformSpec& t);
void from_json(const json& j, TransformSpec& t);
void to_json(json& j, const AugPolicy& p);
void from_json(const json& j, AugPolicy& p);
void to_json(json& j, const TrainConfig& c);
void from_json(const json& j, TrainConfig& c);

}  // namespace mitodet
