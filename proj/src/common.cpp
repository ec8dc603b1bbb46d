// Copyright 2026-present the latent-align project
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "latent_align/common.hpp"

namespace latent_align {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::Io: return "Io";
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::VersionMismatch: return "VersionMismatch";
        case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
        case ErrorCode::Truncated: return "Truncated";
        case ErrorCode::NonFinite: return "NonFinite";
        case ErrorCode::NotNormalized: return "NotNormalized";
        case ErrorCode::ZeroRow: return "ZeroRow";
        case ErrorCode::MissingId: return "MissingId";
        case ErrorCode::DuplicateId: return "DuplicateId";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::TooFewSamples: return "TooFewSamples";
        case ErrorCode::DegenerateSet: return "DegenerateSet";
        case ErrorCode::DegeneratePrototype: return "DegeneratePrototype";
        case ErrorCode::EmptyConcept: return "EmptyConcept";
        case ErrorCode::EmptyPool: return "EmptyPool";
        case ErrorCode::NonUnitRows: return "NonUnitRows";
        case ErrorCode::MissingCls: return "MissingCls";
        case ErrorCode::UnknownLabel: return "UnknownLabel";
        case ErrorCode::NoForegroundClass: return "NoForegroundClass";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::BadCheckpoint: return "BadCheckpoint";
    }
    return "Unknown";
}

}  // namespace latent_align
