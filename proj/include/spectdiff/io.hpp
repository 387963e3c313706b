#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spectdiff/types.hpp"

namespace spectdiff {

uint64_t fnv1a64_bytes(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL);
uint64_t fnv1a64_string(const std::string& s);
uint64_t hash_file(const std::string& path);
std::string hex64(uint64_t h);

// SPVL: magic "SPVL", u32 nx,ny,nz, f32 voxel size (3), then f32 payload.
void write_volume(const std::string& path, const ImageVolume& vol);
ImageVolume read_volume(const std::string& path);

// SPPJ: magic "SPPJ", u32 nu,nv,n_det, f32 pixel size (2), then f32 payload.
void write_projection(const std::string& path, const ProjectionData& proj,
                      double pixel_u = 1.0, double pixel_v = 1.0);
ProjectionData read_projection(const std::string& path);

/// 8-bit PGM montage of the three orthogonal center slices, normalized by the
/// volume maximum.
void write_montage_pgm(const std::string& path, const ImageVolume& vol);

// Plain-text key=value helpers.
std::map<std::string, std::string> read_kv_file(const std::string& path);
std::map<std::string, std::string> parse_kv_text(const std::string& text);
void write_kv_file(const std::string& path, const std::map<std::string, std::string>& kv);

bool file_exists(const std::string& path);

}  // namespace spectdiff
